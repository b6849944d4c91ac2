//! Aligned monthly panels: the series model, long-format CSV I/O, rolling
//! origin splits and a seeded generator of hierarchical demand.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{build_summing_matrix, HierarchySpec, SummingMatrix};

/// Calendar month as a count of months since January of year 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month(i32);

impl Month {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::data(format!("month {month} out of range")));
        }
        Ok(Month(year * 12 + month as i32 - 1))
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(12)
    }

    /// 1..=12
    pub fn month(self) -> u32 {
        self.0.rem_euclid(12) as u32 + 1
    }

    /// 1..=3
    pub fn month_of_quarter(self) -> u32 {
        (self.month() - 1) % 3 + 1
    }

    /// 1..=4
    pub fn quarter(self) -> u32 {
        (self.month() - 1) / 3 + 1
    }

    pub fn offset(self, months: i32) -> Self {
        Month(self.0 + months)
    }

    /// Signed number of months from `earlier` to `self`.
    pub fn since(self, earlier: Month) -> i32 {
        self.0 - earlier.0
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

impl FromStr for Month {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::data(format!("invalid month {s:?}, expected YYYY-MM"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        let year = y.parse::<i32>().map_err(|_| bad())?;
        let month = m.parse::<u32>().map_err(|_| bad())?;
        Month::new(year, month).map_err(|_| bad())
    }
}

impl Serialize for Month {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Month {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One aligned monthly series. Covariate gaps are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSeries {
    pub series_id: String,
    pub key_path: Vec<String>,
    pub timestamps: Vec<Month>,
    pub target: Vec<f64>,
    pub covariates: BTreeMap<String, Vec<Option<f64>>>,
    pub intro_date: Option<Month>,
}

impl PanelSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn covariate(&self, name: &str) -> Option<&[Option<f64>]> {
        self.covariates.get(name).map(Vec::as_slice)
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_len(self.timestamps.len(), self.target.len())?;
        for (name, col) in &self.covariates {
            if col.len() != self.timestamps.len() {
                return Err(Error::data(format!(
                    "series {}: covariate {name} has {} values for {} months",
                    self.series_id,
                    col.len(),
                    self.timestamps.len()
                )));
            }
        }
        for w in self.timestamps.windows(2) {
            if w[1].since(w[0]) != 1 {
                return Err(Error::data(format!(
                    "series {}: months {} and {} are not consecutive",
                    self.series_id, w[0], w[1]
                )));
            }
        }
        if let Some((t, y)) = self
            .target
            .iter()
            .enumerate()
            .find(|(_, y)| !y.is_finite() || **y < 0.0)
        {
            return Err(Error::data(format!(
                "series {}: invalid target {y} at {}",
                self.series_id, self.timestamps[t]
            )));
        }
        Ok(())
    }
}

/// A complete hierarchical panel. `series[i]` is row `i` of `summing`.
#[derive(Debug, Clone)]
pub struct Panel {
    pub series: Vec<PanelSeries>,
    pub hierarchy: HierarchySpec,
    pub summing: SummingMatrix,
}

impl Panel {
    /// Builds the hierarchy from the bottom series' key paths and
    /// materializes every upper node by summation.
    pub fn from_bottom<S: AsRef<str>>(level_names: &[S], bottom: Vec<PanelSeries>) -> Result<Self> {
        let first = bottom
            .first()
            .ok_or_else(|| Error::EmptyInput("panel has no series".into()))?;
        let timestamps = first.timestamps.clone();
        for s in &bottom {
            s.validate()?;
            if s.timestamps != timestamps {
                return Err(Error::data(format!(
                    "series {} is not aligned with series {}",
                    s.series_id, first.series_id
                )));
            }
        }
        let paths: Vec<Vec<String>> = bottom.iter().map(|s| s.key_path.clone()).collect();
        let hierarchy = HierarchySpec::from_key_paths(level_names, &paths)?;
        let summing = build_summing_matrix(&hierarchy)?;

        let mut by_id: HashMap<String, PanelSeries> = bottom
            .into_iter()
            .map(|mut s| {
                s.series_id = s.key_path.join("/");
                (s.series_id.clone(), s)
            })
            .collect();
        let bottom_in_col_order: Vec<PanelSeries> = summing
            .col_ids()
            .iter()
            .map(|id| by_id[id].clone())
            .collect();

        let mut series = Vec::with_capacity(summing.n_series());
        for (row, id) in summing.row_ids().iter().enumerate() {
            if let Some(s) = by_id.remove(id) {
                series.push(s);
                continue;
            }
            let members: Vec<&PanelSeries> = summing
                .descendants(row)
                .into_iter()
                .map(|j| &bottom_in_col_order[j])
                .collect();
            series.push(aggregate_series(id, summing.row_levels()[row], &members, &timestamps));
        }
        Ok(Panel {
            series,
            hierarchy,
            summing,
        })
    }

    pub fn n_series(&self) -> usize {
        self.series.len()
    }

    /// Number of months.
    pub fn len(&self) -> usize {
        self.series[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty() || self.series[0].is_empty()
    }

    pub fn timestamps(&self) -> &[Month] {
        &self.series[0].timestamps
    }

    pub fn level_of(&self, i: usize) -> usize {
        self.summing.row_levels()[i]
    }

    pub fn bottom_indices(&self) -> Vec<usize> {
        self.summing.bottom_rows().to_vec()
    }

    pub fn index_of(&self, month: Month) -> Option<usize> {
        let first = *self.timestamps().first()?;
        let k = month.since(first);
        (k >= 0 && (k as usize) < self.len()).then_some(k as usize)
    }

    /// Target values of every series at time index `t`, in row order.
    pub fn cross_section(&self, t: usize) -> Vec<f64> {
        self.series.iter().map(|s| s.target[t]).collect()
    }
}

fn aggregate_series(
    id: &str,
    level: usize,
    members: &[&PanelSeries],
    timestamps: &[Month],
) -> PanelSeries {
    let n = timestamps.len();
    let mut target = vec![0.0; n];
    for m in members {
        for (acc, y) in target.iter_mut().zip(&m.target) {
            *acc += y;
        }
    }
    let mut covariates = BTreeMap::new();
    if let Some(first) = members.first() {
        for name in first.covariates.keys() {
            let mut col: Vec<Option<f64>> = vec![Some(0.0); n];
            for m in members {
                match m.covariates.get(name) {
                    Some(values) => {
                        for (acc, v) in col.iter_mut().zip(values) {
                            *acc = match (*acc, v) {
                                (Some(a), Some(v)) => Some(a + v),
                                _ => None,
                            };
                        }
                    }
                    None => col.iter_mut().for_each(|c| *c = None),
                }
            }
            covariates.insert(name.clone(), col);
        }
    }
    let key_path = members
        .first()
        .map(|m| m.key_path[..level.min(m.key_path.len())].to_vec())
        .unwrap_or_default();
    PanelSeries {
        series_id: id.to_string(),
        key_path,
        timestamps: timestamps.to_vec(),
        target,
        covariates,
        intro_date: None,
    }
}

/// Column layout of the long-format panel CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelSchema {
    pub key_columns: Vec<String>,
    pub time_column: String,
    pub target_column: String,
    /// Optional per-row introduction month; otherwise the first month with
    /// positive orders is used.
    pub intro_column: Option<String>,
}

impl Default for PanelSchema {
    fn default() -> Self {
        Self {
            key_columns: ["market", "product_cluster", "product_line", "product_type"]
                .map(String::from)
                .to_vec(),
            time_column: "month".into(),
            target_column: "orders".into(),
            intro_column: None,
        }
    }
}

pub fn load_panel(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<Panel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    read_panel_csv(file, schema)
}

fn parse_cell(raw: &str) -> Option<&str> {
    let t = raw.trim();
    (!t.is_empty() && !t.eq_ignore_ascii_case("na") && !t.eq_ignore_ascii_case("nan")).then_some(t)
}

pub fn read_panel_csv<R: Read>(reader: R, schema: &PanelSchema) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("missing column {name:?}")))
    };
    let key_idx: Vec<usize> = schema
        .key_columns
        .iter()
        .map(|k| col(k))
        .collect::<Result<_>>()?;
    let time_idx = col(&schema.time_column)?;
    let target_idx = col(&schema.target_column)?;
    let intro_idx = schema.intro_column.as_deref().map(col).transpose()?;
    let reserved: Vec<usize> = key_idx
        .iter()
        .copied()
        .chain([time_idx, target_idx])
        .chain(intro_idx)
        .collect();
    let cov_idx: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !reserved.contains(i))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    struct Row {
        target: f64,
        covs: Vec<Option<f64>>,
    }
    let mut rows: BTreeMap<Vec<String>, BTreeMap<Month, Row>> = BTreeMap::new();
    let mut intros: BTreeMap<Vec<String>, Month> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = line + 2;
        let key: Vec<String> = key_idx.iter().map(|&i| rec[i].to_string()).collect();
        let month: Month = rec[time_idx]
            .parse()
            .map_err(|e| Error::data(format!("line {line}: {e}")))?;
        let target = parse_cell(&rec[target_idx])
            .ok_or_else(|| Error::data(format!("line {line}: missing {}", schema.target_column)))?
            .parse::<f64>()
            .map_err(|_| {
                Error::data(format!(
                    "line {line}: non-numeric {} {:?}",
                    schema.target_column, &rec[target_idx]
                ))
            })?;
        let covs = cov_idx
            .iter()
            .map(|(i, name)| {
                parse_cell(&rec[*i])
                    .map(|v| {
                        v.parse::<f64>().map_err(|_| {
                            Error::data(format!("line {line}: non-numeric {name} {v:?}"))
                        })
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(i) = intro_idx {
            if let Some(raw) = parse_cell(&rec[i]) {
                let m: Month = raw.parse()?;
                if let Some(prev) = intros.insert(key.clone(), m) {
                    if prev != m {
                        return Err(Error::data(format!(
                            "series {}: conflicting introduction months {prev} and {m}",
                            key.join("/")
                        )));
                    }
                }
            }
        }
        let series = rows.entry(key.clone()).or_default();
        if series.insert(month, Row { target, covs }).is_some() {
            return Err(Error::data(format!(
                "duplicate row for series {} at {month}",
                key.join("/")
            )));
        }
    }
    let (first, last) = rows
        .values()
        .flat_map(|m| m.keys())
        .fold(None, |acc: Option<(Month, Month)>, &m| match acc {
            None => Some((m, m)),
            Some((a, b)) => Some((a.min(m), b.max(m))),
        })
        .ok_or_else(|| Error::EmptyInput("panel CSV has no rows".into()))?;
    let n = (last.since(first) + 1) as usize;
    let timestamps: Vec<Month> = (0..n as i32).map(|k| first.offset(k)).collect();

    let mut bottom = Vec::with_capacity(rows.len());
    for (key, by_month) in rows {
        let id = key.join("/");
        let mut target = Vec::with_capacity(n);
        let mut covariates: BTreeMap<String, Vec<Option<f64>>> = cov_idx
            .iter()
            .map(|(_, name)| (name.clone(), Vec::with_capacity(n)))
            .collect();
        for m in &timestamps {
            let row = by_month
                .get(m)
                .ok_or_else(|| Error::data(format!("series {id} is missing month {m}")))?;
            target.push(row.target);
            for ((_, name), v) in cov_idx.iter().zip(&row.covs) {
                covariates.get_mut(name).expect("declared").push(*v);
            }
        }
        let intro_date = intros.get(&key).copied().or_else(|| {
            target
                .iter()
                .position(|&y| y > 0.0)
                .map(|t| timestamps[t])
        });
        bottom.push(PanelSeries {
            series_id: id,
            key_path: key,
            timestamps: timestamps.clone(),
            target,
            covariates,
            intro_date,
        });
    }
    Panel::from_bottom(&schema.key_columns, bottom)
}

/// Writes the bottom series in long format. Numbers use the shortest
/// representation that parses back to the same `f64`.
pub fn write_panel_csv<W: Write>(writer: W, panel: &Panel, schema: &PanelSchema) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let bottom: Vec<&PanelSeries> = panel
        .bottom_indices()
        .into_iter()
        .map(|i| &panel.series[i])
        .collect();
    let cov_names: Vec<String> = bottom
        .first()
        .map(|s| s.covariates.keys().cloned().collect())
        .unwrap_or_default();
    let mut header: Vec<String> = schema.key_columns.clone();
    header.push(schema.time_column.clone());
    header.push(schema.target_column.clone());
    if let Some(intro) = &schema.intro_column {
        header.push(intro.clone());
    }
    header.extend(cov_names.iter().cloned());
    w.write_record(&header)?;
    for s in bottom {
        for (t, m) in s.timestamps.iter().enumerate() {
            let mut rec: Vec<String> = s.key_path.clone();
            rec.push(m.to_string());
            rec.push(s.target[t].to_string());
            if schema.intro_column.is_some() {
                rec.push(s.intro_date.map(|d| d.to_string()).unwrap_or_default());
            }
            for name in &cov_names {
                rec.push(
                    s.covariates[name][t]
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                );
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rolling-origin plan: the first origin is `train_end` (exclusive end of
/// the first training range), later origins advance one month each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_end: usize,
    pub horizon: usize,
    pub n_windows: usize,
}

impl SplitPlan {
    /// Places the last test window flush with the end of the series.
    pub fn ending_at(series_len: usize, horizon: usize, n_windows: usize) -> Result<Self> {
        let span = horizon + n_windows.saturating_sub(1);
        if horizon == 0 || n_windows == 0 || span >= series_len {
            return Err(Error::invalid(format!(
                "cannot fit {n_windows} windows of horizon {horizon} into {series_len} months"
            )));
        }
        Ok(Self {
            train_end: series_len - span,
            horizon,
            n_windows,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub origin: usize,
    pub train: Range<usize>,
    pub test: Range<usize>,
}

pub fn rolling_windows(plan: &SplitPlan, series_len: usize) -> Result<Vec<Window>> {
    if plan.horizon == 0 || plan.n_windows == 0 || plan.train_end == 0 {
        return Err(Error::invalid(format!("infeasible split plan {plan:?}")));
    }
    let last_end = plan.train_end + plan.n_windows - 1 + plan.horizon;
    if last_end > series_len {
        return Err(Error::invalid(format!(
            "split plan {plan:?} runs to month {last_end} past series length {series_len}"
        )));
    }
    Ok((0..plan.n_windows)
        .map(|w| {
            let origin = plan.train_end + w;
            Window {
                origin,
                train: 0..origin,
                test: origin..origin + plan.horizon,
            }
        })
        .collect())
}

/// Knobs for [`generate_synthetic`]. The product tree (clusters, lines,
/// types) is shared by every market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub markets: usize,
    pub clusters: usize,
    pub lines_per_cluster: usize,
    pub types_per_line: usize,
    pub months: usize,
    pub start: Month,
    /// Mean monthly orders of a typical product type at peak.
    pub base_volume: f64,
    /// Log-scale sd of idiosyncratic multiplicative noise.
    pub noise: f64,
    /// Innovation sd of the AR(1) common shock shared by all markets.
    pub shock: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            markets: 23,
            clusters: 2,
            lines_per_cluster: 2,
            types_per_line: 5,
            months: 120,
            start: Month(2013 * 12),
            base_volume: 6.0,
            noise: 0.3,
            shock: 0.1,
            seed: 7,
        }
    }
}

/// Level names used by the generator (below the brand total).
pub const SYNTHETIC_LEVELS: [&str; 4] = ["market", "product_cluster", "product_line", "product_type"];

/// Life-cycle envelope at `age` months for a product living `span` months,
/// with multiplicative bumps `(centre, height)` on the unit age scale.
pub fn lifecycle_envelope(age: f64, span: f64, bumps: &[(f64, f64)]) -> f64 {
    if age <= 0.0 || age >= span {
        return 0.0;
    }
    let u = age / span;
    let base = (PI * u).sin().powf(0.8);
    let lift: f64 = bumps
        .iter()
        .map(|&(c, h)| h * (-(u - c).powi(2) / (2.0 * 0.06 * 0.06)).exp())
        .sum();
    base * (1.0 + lift)
}

struct ProductLife {
    intro: i32,
    span: f64,
    bumps: [(f64, f64); 2],
    popularity: f64,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Panel> {
    let n_types = cfg.clusters * cfg.lines_per_cluster * cfg.types_per_line;
    if cfg.markets == 0 || n_types == 0 || cfg.months < 2 {
        return Err(Error::invalid("synthetic config yields no series"));
    }
    if !(cfg.base_volume > 0.0 && cfg.noise >= 0.0 && cfg.shock >= 0.0) {
        return Err(Error::invalid("synthetic volume/noise/shock out of range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let months = cfg.months as i32;
    let timestamps: Vec<Month> = (0..months).map(|k| cfg.start.offset(k)).collect();

    let popularity = LogNormal::new(0.0, 0.6).expect("valid");
    let products: Vec<ProductLife> = (0..n_types)
        .map(|_| ProductLife {
            intro: rng.random_range(-48..=months / 2),
            span: rng.random_range(60.0..=84.0),
            bumps: [
                (rng.random_range(0.3..0.55), rng.random_range(0.2..0.5)),
                (rng.random_range(0.55..0.8), rng.random_range(0.2..0.5)),
            ],
            popularity: popularity.sample(&mut rng),
        })
        .collect();

    let shock = Normal::new(0.0, cfg.shock.max(1e-12)).expect("valid");
    let mut common = Vec::with_capacity(cfg.months);
    let mut c = 0.0;
    for _ in 0..cfg.months {
        c = 0.6 * c + if cfg.shock > 0.0 { shock.sample(&mut rng) } else { 0.0 };
        common.push(c);
    }

    let market_size = LogNormal::new(0.0, 0.8).expect("valid");
    let fit = LogNormal::new(0.0, 0.3).expect("valid");
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid");
    let visit_noise = Normal::new(0.0, 0.2).expect("valid");

    let mut bottom = Vec::with_capacity(cfg.markets * n_types);
    for m in 0..cfg.markets {
        let size = market_size.sample(&mut rng);
        let amplitude = rng.random_range(0.1..0.35);
        let phase = rng.random_range(-0.5..0.5);
        let trend = rng.random_range(-0.003..0.004);
        let market = format!("M{:02}", m + 1);
        for (p, life) in products.iter().enumerate() {
            let cluster = p / (cfg.lines_per_cluster * cfg.types_per_line);
            let line = p / cfg.types_per_line;
            let delay = rng.random_range(0..=2);
            let intro = life.intro + delay;
            let affinity = fit.sample(&mut rng);
            let mut target = Vec::with_capacity(cfg.months);
            let mut visits = Vec::with_capacity(cfg.months);
            for t in 0..months {
                let age = (t - intro) as f64;
                let env = lifecycle_envelope(age, life.span, &life.bumps);
                let month = timestamps[t as usize].month() as f64;
                let season = 1.0 + amplitude * (2.0 * PI * (month - 1.0) / 12.0 + phase).sin();
                let eps = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let mean = cfg.base_volume
                    * size
                    * life.popularity
                    * affinity
                    * env
                    * season
                    * (trend * t as f64 + common[t as usize] + eps).exp();
                let y = if mean > 0.0 {
                    Poisson::new(mean).expect("positive mean").sample(&mut rng)
                } else {
                    0.0
                };
                target.push(y);
                visits.push(Some(
                    (30.0 * mean * f64::exp(visit_noise.sample(&mut rng))).round(),
                ));
            }
            let mut covariates = BTreeMap::new();
            covariates.insert("visits".to_string(), visits);
            bottom.push(PanelSeries {
                series_id: String::new(),
                key_path: vec![
                    market.clone(),
                    format!("C{}", cluster + 1),
                    format!("C{}-L{}", cluster + 1, line + 1),
                    format!("C{}-L{}-T{}", cluster + 1, line + 1, p + 1),
                ],
                timestamps: timestamps.clone(),
                target,
                covariates,
                intro_date: Some(cfg.start.offset(intro)),
            });
        }
    }
    Panel::from_bottom(&SYNTHETIC_LEVELS, bottom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::check_coherence;

    const TOY: &str = "\
market,product_cluster,product_line,product_type,month,orders,visits
DE,C1,L1,T1,2020-01,3,10
DE,C1,L1,T2,2020-01,1,
DE,C1,L1,T1,2020-02,4,12
DE,C1,L1,T2,2020-02,0,5
";

    #[test]
    fn month_parse_and_display() {
        let m: Month = "2021-03".parse().unwrap();
        assert_eq!(m.year(), 2021);
        assert_eq!(m.month(), 3);
        assert_eq!(m.quarter(), 1);
        assert_eq!(m.month_of_quarter(), 3);
        assert_eq!(m.to_string(), "2021-03");
        assert_eq!(m.offset(10).to_string(), "2022-01");
        assert!("2021-13".parse::<Month>().is_err());
        assert!("202103".parse::<Month>().is_err());
    }

    #[test]
    fn toy_csv_materializes_aggregates() {
        let panel = read_panel_csv(TOY.as_bytes(), &PanelSchema::default()).unwrap();
        // 2 leaves + line + cluster + market + total
        assert_eq!(panel.n_series(), 6);
        let root = &panel.series[0];
        assert_eq!(root.series_id, "total");
        assert_eq!(root.target, vec![4.0, 4.0]);
        // one leaf has a missing visit in January -> absent in every ancestor
        assert_eq!(root.covariates["visits"], vec![None, Some(17.0)]);
        let t2 = panel
            .series
            .iter()
            .find(|s| s.series_id == "DE/C1/L1/T2")
            .unwrap();
        assert_eq!(t2.intro_date, Some("2020-01".parse().unwrap()));
    }

    #[test]
    fn two_leaf_flat_schema() {
        let csv = "market,month,orders\nA,2020-01,1\nB,2020-01,2\nA,2020-02,3\nB,2020-02,5\n";
        let schema = PanelSchema {
            key_columns: vec!["market".into()],
            ..PanelSchema::default()
        };
        let panel = read_panel_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(panel.n_series(), 3);
        assert_eq!(panel.series[0].target, vec![3.0, 8.0]);
    }

    #[test]
    fn missing_month_names_leaf_and_month() {
        let csv = "market,month,orders\nA,2020-01,1\nB,2020-01,2\nA,2020-02,3\n";
        let schema = PanelSchema {
            key_columns: vec!["market".into()],
            ..PanelSchema::default()
        };
        let err = read_panel_csv(csv.as_bytes(), &schema).unwrap_err().to_string();
        assert!(err.contains("B") && err.contains("2020-02"), "{err}");
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        let schema = PanelSchema {
            key_columns: vec!["market".into()],
            ..PanelSchema::default()
        };
        let dup = "market,month,orders\nA,2020-01,1\nA,2020-01,2\n";
        assert!(read_panel_csv(dup.as_bytes(), &schema).is_err());
        let junk = "market,month,orders\nA,2020-01,lots\n";
        assert!(read_panel_csv(junk.as_bytes(), &schema).is_err());
        let neg = "market,month,orders\nA,2020-01,-1\n";
        assert!(read_panel_csv(neg.as_bytes(), &schema).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let cfg = SyntheticConfig {
            markets: 2,
            months: 24,
            ..SyntheticConfig::default()
        };
        let mut panel = generate_synthetic(&cfg).unwrap();
        // awkward floats survive the trip
        let b = panel.bottom_indices()[0];
        panel.series[b].target[3] = 0.1 + 0.2;
        let schema = PanelSchema {
            intro_column: Some("intro".into()),
            ..PanelSchema::default()
        };
        let mut buf = Vec::new();
        write_panel_csv(&mut buf, &panel, &schema).unwrap();
        let back = read_panel_csv(buf.as_slice(), &schema).unwrap();
        for i in panel.bottom_indices() {
            let a = &panel.series[i];
            let b = back.series.iter().find(|s| s.series_id == a.series_id).unwrap();
            assert_eq!(
                a.target.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.target.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(a.covariates, b.covariates);
            assert_eq!(a.intro_date, b.intro_date);
        }
    }

    #[test]
    fn rolling_window_examples() {
        let plan = SplitPlan::ending_at(24, 6, 7).unwrap();
        assert_eq!(plan.train_end, 12);
        let w = rolling_windows(&plan, 24).unwrap();
        assert_eq!(w.len(), 7);
        assert_eq!(w.iter().map(|w| w.origin).collect::<Vec<_>>(), (12..=18).collect::<Vec<_>>());
        assert!(w.iter().all(|w| w.test.len() == 6 && w.train.end == w.test.start));

        let single = SplitPlan { train_end: 10, horizon: 3, n_windows: 1 };
        assert_eq!(
            rolling_windows(&single, 20).unwrap(),
            vec![Window { origin: 10, train: 0..10, test: 10..13 }]
        );

        let one_step = SplitPlan { train_end: 5, horizon: 1, n_windows: 3 };
        let w = rolling_windows(&one_step, 8).unwrap();
        assert_eq!(w.iter().map(|w| w.test.clone()).collect::<Vec<_>>(), vec![5..6, 6..7, 7..8]);

        assert!(rolling_windows(&SplitPlan { train_end: 20, horizon: 6, n_windows: 2 }, 24).is_err());
        assert!(SplitPlan::ending_at(10, 6, 5).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_coherent() {
        let cfg = SyntheticConfig {
            markets: 3,
            months: 36,
            ..SyntheticConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.series, b.series);
        for t in 0..a.len() {
            let r = check_coherence(&a.summing, &a.cross_section(t), 1e-9).unwrap();
            assert!(r.coherent);
        }
        let other = generate_synthetic(&SyntheticConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.series, other.series);
    }

    #[test]
    fn synthetic_market_count() {
        let cfg = SyntheticConfig {
            months: 24,
            ..SyntheticConfig::default()
        };
        let panel = generate_synthetic(&cfg).unwrap();
        // oracle: distinct first key components
        let markets: std::collections::BTreeSet<_> = panel
            .bottom_indices()
            .iter()
            .map(|&i| panel.series[i].key_path[0].clone())
            .collect();
        assert_eq!(markets.len(), 23);
        assert_eq!((0..panel.n_series()).filter(|&i| panel.level_of(i) == 1).count(), 23);
        assert_eq!((0..panel.n_series()).filter(|&i| panel.level_of(i) == 0).count(), 1);
        assert_eq!(panel.summing.n_bottom(), 23 * 20);
    }

    fn cv2(values: &[f64]) -> f64 {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        var / (mean * mean)
    }

    #[test]
    fn bottom_more_erratic_than_top() {
        let panel = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let top = cv2(&panel.series[0].target);
        let bottoms: Vec<f64> = panel
            .bottom_indices()
            .iter()
            .map(|&i| &panel.series[i].target)
            .filter(|t| t.iter().any(|&y| y > 0.0))
            .map(|t| cv2(t))
            .collect();
        let mean_bottom = bottoms.iter().sum::<f64>() / bottoms.len() as f64;
        assert!(mean_bottom > top, "bottom {mean_bottom} top {top}");
    }

    #[test]
    fn envelope_starts_at_zero() {
        let bumps = [(0.4, 0.3), (0.7, 0.3)];
        assert_eq!(lifecycle_envelope(0.0, 72.0, &bumps), 0.0);
        assert!(lifecycle_envelope(0.5, 72.0, &bumps) < 0.1);
        assert!(lifecycle_envelope(36.0, 72.0, &bumps) > 0.5);
        assert_eq!(lifecycle_envelope(72.0, 72.0, &bumps), 0.0);
    }

    #[test]
    fn degenerate_config_rejected() {
        let cfg = SyntheticConfig {
            markets: 0,
            ..SyntheticConfig::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }
}
