//! Multi-step quantile strategies over a pluggable learner.
//!
//! Every strategy trains on pools of series: each active pool stacks its
//! members' rows (per-series scaled, with a one-hot member column for small
//! pools) and a series' forecast is the mean over the requested strategies
//! and the active pools that contain it. With singleton pools this is plain
//! local modelling; with one strategy and one pool it is that strategy's
//! pooled forecast.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::empirical_quantile;
use crate::error::{Error, Result};
use crate::features::{avm, sum_columns, FeatureSpec, SeriesView, AVM_COVARIATE};
use crate::metrics::{pinball, QuantileGrid};
use crate::panel::{Month, Panel};

/// Learner trained for one quantile; deterministic given its seed.
pub trait QuantileLearner: Send + Sync {
    fn fit(&mut self, x: &[Vec<f64>], y: &[f64], q: f64) -> Result<()>;
    fn predict(&self, x: &[f64]) -> Result<f64>;
}

pub trait LearnerFactory: Send + Sync {
    fn name(&self) -> &str;
    fn build(&self, seed: u64) -> Box<dyn QuantileLearner>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearPinballConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for LinearPinballConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            learning_rate: 0.5,
            l2: 0.0,
        }
    }
}

/// Linear model fitted by full-batch subgradient descent on the mean
/// pinball loss over standardized features. Step `lr / sqrt(k + 1)`, the
/// intercept starts at the empirical q-quantile, slopes at small seeded
/// values, and the iterate with the lowest training loss is kept.
#[derive(Debug, Clone)]
pub struct LinearPinball {
    cfg: LinearPinballConfig,
    seed: u64,
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    intercept: f64,
    fitted: bool,
}

impl LinearPinball {
    pub fn new(cfg: LinearPinballConfig, seed: u64) -> Self {
        Self {
            cfg,
            seed,
            mean: Vec::new(),
            scale: Vec::new(),
            weights: Vec::new(),
            intercept: 0.0,
            fitted: false,
        }
    }

    /// Coefficients on the original feature scale: `(intercept, slopes)`.
    pub fn coefficients(&self) -> (f64, Vec<f64>) {
        let slopes: Vec<f64> = self.weights.iter().zip(&self.scale).map(|(w, s)| w / s).collect();
        let shift: f64 = slopes.iter().zip(&self.mean).map(|(b, m)| b * m).sum();
        (self.intercept - shift, slopes)
    }
}

impl QuantileLearner for LinearPinball {
    fn fit(&mut self, x: &[Vec<f64>], y: &[f64], q: f64) -> Result<()> {
        Error::check_len(x.len(), y.len())?;
        if y.is_empty() {
            return Err(Error::EmptyInput("no training rows".into()));
        }
        let n = y.len();
        let p = x[0].len();
        for row in x {
            Error::check_len(p, row.len())?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite feature value"));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite target value"));
        }
        let nf = n as f64;
        self.mean = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
        self.scale = (0..p)
            .map(|j| {
                let m = self.mean[j];
                let sd = (x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / nf).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|r| (0..p).map(|j| (r[j] - self.mean[j]) / self.scale[j]).collect())
            .collect();
        let mut sorted = y.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut b = empirical_quantile(&sorted, q);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut w: Vec<f64> = (0..p).map(|_| rng.random_range(-0.01..0.01)).collect();
        let loss_of = |w: &[f64], b: f64, pred: &mut [f64]| -> f64 {
            let mut loss = 0.0;
            for i in 0..n {
                pred[i] = b + z[i].iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
                loss += pinball(y[i], pred[i], q);
            }
            loss / nf + 0.5 * self.cfg.l2 * w.iter().map(|v| v * v).sum::<f64>()
        };
        let mut pred = vec![0.0; n];
        let mut best = (loss_of(&w, b, &mut pred), w.clone(), b);
        let mut grad = vec![0.0; p];
        for k in 0..self.cfg.iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for i in 0..n {
                let g = if y[i] < pred[i] {
                    1.0 - q
                } else if y[i] > pred[i] {
                    -q
                } else {
                    0.0
                };
                if g != 0.0 {
                    gb += g;
                    for (gj, zj) in grad.iter_mut().zip(&z[i]) {
                        *gj += g * zj;
                    }
                }
            }
            let step = self.cfg.learning_rate / ((k + 1) as f64).sqrt();
            b -= step * gb / nf;
            for (wj, gj) in w.iter_mut().zip(&grad) {
                *wj -= step * (gj / nf + self.cfg.l2 * *wj);
            }
            let loss = loss_of(&w, b, &mut pred);
            if loss < best.0 {
                best = (loss, w.clone(), b);
            }
        }
        self.weights = best.1;
        self.intercept = best.2;
        self.fitted = true;
        Ok(())
    }

    fn predict(&self, x: &[f64]) -> Result<f64> {
        if !self.fitted {
            return Err(Error::invalid("predict before fit"));
        }
        Error::check_len(self.weights.len(), x.len())?;
        Ok(self.intercept
            + x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((v, m), s), w)| (v - m) / s * w)
                .sum::<f64>())
    }
}

#[derive(Debug, Clone)]
pub struct LinearPinballFactory(pub LinearPinballConfig);

impl LearnerFactory for LinearPinballFactory {
    fn name(&self) -> &str {
        "linear_pinball"
    }

    fn build(&self, seed: u64) -> Box<dyn QuantileLearner> {
        Box::new(LinearPinball::new(self.0, seed))
    }
}

/// Ignores features and predicts the empirical q-quantile of the targets.
#[derive(Debug, Clone, Default)]
pub struct EmpiricalQuantile {
    value: Option<f64>,
}

impl QuantileLearner for EmpiricalQuantile {
    fn fit(&mut self, _x: &[Vec<f64>], y: &[f64], q: f64) -> Result<()> {
        if y.is_empty() {
            return Err(Error::EmptyInput("no training rows".into()));
        }
        let mut sorted = y.to_vec();
        sorted.sort_by(f64::total_cmp);
        self.value = Some(empirical_quantile(&sorted, q));
        Ok(())
    }

    fn predict(&self, _x: &[f64]) -> Result<f64> {
        self.value.ok_or_else(|| Error::invalid("predict before fit"))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmpiricalQuantileFactory;

impl LearnerFactory for EmpiricalQuantileFactory {
    fn name(&self) -> &str {
        "empirical_quantile"
    }

    fn build(&self, _seed: u64) -> Box<dyn QuantileLearner> {
        Box::new(EmpiricalQuantile::default())
    }
}

/// Registry keyed by learner name; `params` is the learner's config table.
pub fn learner_factory(name: &str, params: Option<&serde_json::Value>) -> Result<Arc<dyn LearnerFactory>> {
    match name {
        "linear_pinball" => {
            let cfg = match params {
                Some(v) => serde_json::from_value(v.clone())
                    .map_err(|e| Error::Config(format!("linear_pinball params: {e}")))?,
                None => LinearPinballConfig::default(),
            };
            Ok(Arc::new(LinearPinballFactory(cfg)))
        }
        "empirical_quantile" => Ok(Arc::new(EmpiricalQuantileFactory)),
        other => Err(Error::Config(format!("unknown learner {other:?}"))),
    }
}

/// Quantile forecasts indexed by (series, step, quantile).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGridForecast {
    series_ids: Vec<String>,
    horizon: usize,
    grid: QuantileGrid,
    values: Vec<f64>,
}

impl QuantileGridForecast {
    pub fn zeros(series_ids: Vec<String>, horizon: usize, grid: QuantileGrid) -> Self {
        let n = series_ids.len() * horizon * grid.len();
        Self {
            series_ids,
            horizon,
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn series_ids(&self) -> &[String] {
        &self.series_ids
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    fn offset(&self, i: usize, h: usize) -> usize {
        (i * self.horizon + h) * self.grid.len()
    }

    /// Values over the grid for series `i` at zero-based step `h`.
    pub fn step(&self, i: usize, h: usize) -> &[f64] {
        let o = self.offset(i, h);
        &self.values[o..o + self.grid.len()]
    }

    pub fn step_mut(&mut self, i: usize, h: usize) -> &mut [f64] {
        let o = self.offset(i, h);
        let q = self.grid.len();
        &mut self.values[o..o + q]
    }

    pub fn get(&self, i: usize, h: usize, qi: usize) -> f64 {
        self.values[self.offset(i, h) + qi]
    }

    pub fn set(&mut self, i: usize, h: usize, qi: usize, v: f64) {
        let o = self.offset(i, h);
        self.values[o + qi] = v;
    }

    /// Path over the horizon for series `i` at quantile index `qi`.
    pub fn path(&self, i: usize, qi: usize) -> Vec<f64> {
        (0..self.horizon).map(|h| self.get(i, h, qi)).collect()
    }

    pub fn median_path(&self, i: usize) -> Vec<f64> {
        self.path(i, self.grid.median_index())
    }

    /// All series at step `h`, quantile `qi`.
    pub fn cross_section(&self, h: usize, qi: usize) -> Vec<f64> {
        (0..self.series_ids.len()).map(|i| self.get(i, h, qi)).collect()
    }

    /// Clips at zero and sorts each (series, step) across the grid.
    pub fn finalize(&mut self) {
        let q = self.grid.len();
        for cell in self.values.chunks_mut(q) {
            for v in cell.iter_mut() {
                *v = v.max(0.0);
            }
            cell.sort_by(f64::total_cmp);
        }
    }

    pub fn is_non_crossing(&self) -> bool {
        self.values
            .chunks(self.grid.len())
            .all(|c| c.windows(2).all(|w| w[0] <= w[1]))
    }

    pub fn same_index(&self, other: &Self) -> bool {
        self.series_ids == other.series_ids && self.horizon == other.horizon && self.grid == other.grid
    }

    /// CSV with columns `series_id, step, q<level>...`, one row per
    /// (series, step); values written with round-trip precision.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["series_id".to_string(), "step".to_string()];
        header.extend(self.grid.as_slice().iter().map(|q| format!("q{q}")));
        w.write_record(&header)?;
        for (i, id) in self.series_ids.iter().enumerate() {
            for h in 0..self.horizon {
                let mut rec = vec![id.clone(), (h + 1).to_string()];
                rec.extend(self.step(i, h).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "series_id" || &header[1] != "step" {
            return Err(Error::data("forecast file needs series_id, step and quantile columns"));
        }
        let grid: Vec<f64> = header
            .iter()
            .skip(2)
            .map(|c| {
                c.strip_prefix('q')
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::data(format!("bad quantile column {c:?}")))
            })
            .collect::<Result<_>>()?;
        let grid = QuantileGrid::new(grid)?;
        let mut rows: Vec<(String, usize, Vec<f64>)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let step: usize = rec[1]
                .parse()
                .map_err(|_| Error::data(format!("bad step {:?}", &rec[1])))?;
            let vals = rec
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|_| Error::data(format!("bad value {v:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push((rec[0].to_string(), step, vals));
        }
        let mut ids: Vec<String> = Vec::new();
        for (id, _, _) in &rows {
            if ids.last() != Some(id) {
                if ids.contains(id) {
                    return Err(Error::data(format!("rows for {id} are not contiguous")));
                }
                ids.push(id.clone());
            }
        }
        let horizon = rows.iter().map(|r| r.1).max().unwrap_or(0);
        if horizon == 0 || rows.len() != ids.len() * horizon {
            return Err(Error::data("forecast file is not a full series x step grid"));
        }
        let mut out = Self::zeros(ids, horizon, grid);
        for (k, (_, step, vals)) in rows.into_iter().enumerate() {
            if step != k % horizon + 1 {
                return Err(Error::data("steps must run 1..H within each series"));
            }
            out.step_mut(k / horizon, step - 1).copy_from_slice(&vals);
        }
        Ok(out)
    }
}

/// Pointwise mean, then finalization. Each cell sums its inputs in sorted
/// order, so the result does not depend on input order.
pub fn ensemble(forecasts: &[&QuantileGridForecast]) -> Result<QuantileGridForecast> {
    let first = forecasts
        .first()
        .ok_or_else(|| Error::EmptyInput("nothing to ensemble".into()))?;
    if forecasts.iter().any(|f| !f.same_index(first)) {
        return Err(Error::data("ensemble inputs have different index sets"));
    }
    let mut out = (*first).clone();
    let k = forecasts.len() as f64;
    let mut cell = Vec::with_capacity(forecasts.len());
    for idx in 0..out.values.len() {
        cell.clear();
        cell.extend(forecasts.iter().map(|f| f.values[idx]));
        cell.sort_by(f64::total_cmp);
        out.values[idx] = cell.iter().sum::<f64>() / k;
    }
    out.finalize();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool {
    pub id: String,
    pub members: Vec<String>,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PoolAssignment {
    pub pools: Vec<Pool>,
}

impl PoolAssignment {
    /// One pool per series (no pooling).
    pub fn singletons(ids: &[String]) -> Self {
        Self {
            pools: ids
                .iter()
                .map(|id| Pool {
                    id: format!("single:{id}"),
                    members: vec![id.clone()],
                    active: true,
                })
                .collect(),
        }
    }

    /// One pool per hierarchy level.
    pub fn by_level(panel: &Panel) -> Self {
        let mut by: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (i, s) in panel.series.iter().enumerate() {
            by.entry(panel.level_of(i)).or_default().push(s.series_id.clone());
        }
        Self {
            pools: by
                .into_iter()
                .map(|(l, members)| Pool {
                    id: format!("level:{l}"),
                    members,
                    active: true,
                })
                .collect(),
        }
    }

    pub fn global(ids: &[String]) -> Self {
        Self {
            pools: vec![Pool {
                id: "global".into(),
                members: ids.to_vec(),
                active: true,
            }],
        }
    }

    pub fn active(&self) -> impl Iterator<Item = &Pool> {
        self.pools.iter().filter(|p| p.active)
    }

    /// Active pools containing each series; errors when one has none.
    pub fn coverage(&self, ids: &[String]) -> Result<Vec<Vec<usize>>> {
        let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut cover = vec![Vec::new(); ids.len()];
        for (g, pool) in self.pools.iter().enumerate().filter(|(_, p)| p.active) {
            for m in &pool.members {
                let i = *index
                    .get(m.as_str())
                    .ok_or_else(|| Error::data(format!("pool {} names unknown series {m}", pool.id)))?;
                cover[i].push(g);
            }
        }
        if let Some(i) = cover.iter().position(Vec::is_empty) {
            return Err(Error::data(format!("series {} is in no active pool", ids[i])));
        }
        Ok(cover)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Dir,
    Rec,
    Hyb,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Dir => "DIR",
            Strategy::Rec => "REC",
            Strategy::Hyb => "HYB",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub features: FeatureSpec,
    /// Divide each series by its mean absolute training value.
    pub scale: bool,
    /// Most recent training origins kept per series and step.
    pub max_train_origins: Option<usize>,
    /// Pools up to this size get one-hot member columns.
    pub max_one_hot: usize,
    pub seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            features: FeatureSpec::default(),
            scale: true,
            max_train_origins: Some(36),
            max_one_hot: 32,
            seed: 7,
        }
    }
}

/// One series cut at the training end, scaled.
#[derive(Debug, Clone)]
struct Prepared {
    scale: f64,
    target: Vec<f64>,
    covariates: BTreeMap<String, Vec<Option<f64>>>,
    start: Month,
    intro: Option<Month>,
}

impl Prepared {
    fn view<'a>(&'a self, target: &'a [f64]) -> SeriesView<'a> {
        SeriesView {
            target,
            start: self.start,
            intro: self.intro,
            covariates: &self.covariates,
        }
    }
}

fn mean_abs(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v.abs(), n + 1));
    if n == 0 || sum <= 0.0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// Adds the summed leaf AVM as a covariate on every aggregate series.
pub fn with_aggregate_avm(panel: &Panel, k: usize) -> Result<Panel> {
    let mut out = panel.clone();
    let ts = panel.timestamps().to_vec();
    let s = &panel.summing;
    let leaf_cols: Vec<_> = s
        .bottom_rows()
        .iter()
        .map(|&r| {
            let series = &panel.series[r];
            match series.intro_date {
                Some(intro) if intro <= *ts.last().expect("panel has timestamps") => {
                    avm(&series.target, &ts, intro, k)
                }
                _ => avm(&series.target, &ts, ts[0], k),
            }
        })
        .collect::<Result<_>>()?;
    for row in 0..s.n_series() {
        if s.bottom_rows().contains(&row) {
            continue;
        }
        let cols: Vec<_> = s.descendants(row).into_iter().map(|j| &leaf_cols[j]).collect();
        let summed = sum_columns(&cols)?;
        out.series[row]
            .covariates
            .insert(AVM_COVARIATE.to_string(), summed.values);
    }
    Ok(out)
}

fn prepare(panel: &Panel, i: usize, train_end: usize, scale: bool) -> Prepared {
    let s = &panel.series[i];
    let target = &s.target[..train_end];
    let y_scale = if scale { mean_abs(target.iter().copied()) } else { 1.0 };
    let covariates = s
        .covariates
        .iter()
        .map(|(name, col)| {
            let col = &col[..train_end.min(col.len())];
            let c_scale = if !scale {
                1.0
            } else if name == AVM_COVARIATE {
                y_scale
            } else {
                mean_abs(col.iter().flatten().copied())
            };
            (name.clone(), col.iter().map(|v| v.map(|v| v / c_scale)).collect())
        })
        .collect();
    Prepared {
        scale: y_scale,
        target: target.iter().map(|v| v / y_scale).collect(),
        covariates,
        start: panel.timestamps()[0],
        intro: s.intro_date,
    }
}

fn stable_hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct PoolJob<'a> {
    members: Vec<&'a Prepared>,
    one_hot: bool,
    seed: u64,
    label: String,
}

impl PoolJob<'_> {
    fn row(&self, cfg: &StrategyConfig, m: usize, target: &[f64], ar_end: usize, exog_at: usize, target_t: usize) -> Vec<f64> {
        let mut row = cfg.features.row(&self.members[m].view(target), ar_end, exog_at, target_t);
        if self.one_hot {
            row.extend((0..self.members.len()).map(|k| if k == m { 1.0 } else { 0.0 }));
        }
        row
    }

    /// Training origins for a target `h` steps (1-based) past the origin.
    fn origins(&self, cfg: &StrategyConfig, train_end: usize, h: usize) -> Result<std::ops::RangeInclusive<usize>> {
        let warm = cfg.features.warmup();
        if train_end < warm + h {
            return Err(Error::InsufficientHistory {
                needed: warm + h,
                available: train_end,
            });
        }
        let hi = train_end - h;
        let lo = match cfg.max_train_origins {
            Some(m) if m >= 1 => warm.max((hi + 1).saturating_sub(m)),
            _ => warm,
        };
        Ok(lo..=hi)
    }

    fn fit(
        &self,
        factory: &dyn LearnerFactory,
        x: &[Vec<f64>],
        y: &[f64],
        q: f64,
        tag: (Strategy, usize, usize),
    ) -> Result<Box<dyn QuantileLearner>> {
        let (strategy, h, qi) = tag;
        let seed = self.seed ^ ((h as u64) << 20) ^ qi as u64;
        let mut learner = factory.build(seed);
        learner.fit(x, y, q).map_err(|e| Error::Learner {
            context: format!("{} pool {} h={} q={}", strategy.name(), self.label, h, q),
            message: e.to_string(),
        })?;
        Ok(learner)
    }

    /// `[member][step][quantile]` in scaled units.
    fn run(
        &self,
        strategy: Strategy,
        factory: &dyn LearnerFactory,
        cfg: &StrategyConfig,
        train_end: usize,
        horizon: usize,
        grid: &QuantileGrid,
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let qs = grid.as_slice();
        let n_q = qs.len();
        let mut out = vec![vec![vec![0.0; n_q]; horizon]; self.members.len()];
        match strategy {
            Strategy::Dir => {
                let per_step: Vec<Vec<Vec<f64>>> = (1..=horizon)
                    .into_par_iter()
                    .map(|h| -> Result<Vec<Vec<f64>>> {
                        let (x, y) = self.training(cfg, train_end, h, false)?;
                        let preds: Vec<Vec<f64>> = (0..n_q)
                            .into_par_iter()
                            .map(|qi| -> Result<Vec<f64>> {
                                let model = self.fit(factory, &x, &y, qs[qi], (strategy, h, qi))?;
                                (0..self.members.len())
                                    .map(|m| {
                                        let t = &self.members[m].target;
                                        model.predict(&self.row(cfg, m, t, train_end, train_end - 1, train_end + h - 1))
                                    })
                                    .collect()
                            })
                            .collect::<Result<_>>()?;
                        Ok(preds)
                    })
                    .collect::<Result<_>>()?;
                for (h, preds) in per_step.into_iter().enumerate() {
                    for (qi, by_member) in preds.into_iter().enumerate() {
                        for (m, v) in by_member.into_iter().enumerate() {
                            out[m][h][qi] = v;
                        }
                    }
                }
            }
            Strategy::Rec => {
                let (x, y) = self.training(cfg, train_end, 1, false)?;
                let paths: Vec<Vec<Vec<f64>>> = (0..n_q)
                    .into_par_iter()
                    .map(|qi| -> Result<Vec<Vec<f64>>> {
                        let model = self.fit(factory, &x, &y, qs[qi], (strategy, 1, qi))?;
                        (0..self.members.len())
                            .map(|m| {
                                let mut ext = self.members[m].target.clone();
                                let mut path = Vec::with_capacity(horizon);
                                for h in 0..horizon {
                                    let t = train_end + h;
                                    let v = model.predict(&self.row(cfg, m, &ext, t, train_end - 1, t))?;
                                    path.push(v);
                                    ext.push(v.max(0.0));
                                }
                                Ok(path)
                            })
                            .collect()
                    })
                    .collect::<Result<_>>()?;
                for (qi, by_member) in paths.into_iter().enumerate() {
                    for (m, path) in by_member.into_iter().enumerate() {
                        for (h, v) in path.into_iter().enumerate() {
                            out[m][h][qi] = v;
                        }
                    }
                }
            }
            Strategy::Hyb => {
                let models: Vec<Vec<Box<dyn QuantileLearner>>> = (1..=horizon)
                    .into_par_iter()
                    .map(|h| -> Result<Vec<Box<dyn QuantileLearner>>> {
                        let (x, y) = self.training(cfg, train_end, h, true)?;
                        (0..n_q)
                            .into_par_iter()
                            .map(|qi| self.fit(factory, &x, &y, qs[qi], (strategy, h, qi)))
                            .collect()
                    })
                    .collect::<Result<_>>()?;
                for m in 0..self.members.len() {
                    let t = &self.members[m].target;
                    for qi in 0..n_q {
                        let mut earlier: Vec<f64> = Vec::with_capacity(horizon);
                        for h in 1..=horizon {
                            let mut row = self.row(cfg, m, t, train_end, train_end - 1, train_end + h - 1);
                            row.extend(&earlier);
                            let v = models[h - 1][qi].predict(&row)?;
                            out[m][h - 1][qi] = v;
                            earlier.push(v.max(0.0));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Stacked rows for a target `h` steps ahead; `chain` appends the
    /// actuals of the intermediate steps (hybrid training inputs).
    fn training(&self, cfg: &StrategyConfig, train_end: usize, h: usize, chain: bool) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let origins = self.origins(cfg, train_end, h)?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (m, member) in self.members.iter().enumerate() {
            let t = &member.target;
            for o in origins.clone() {
                let mut row = self.row(cfg, m, t, o, o - 1, o + h - 1);
                if chain {
                    row.extend(&t[o..o + h - 1]);
                }
                x.push(row);
                y.push(t[o + h - 1]);
            }
        }
        Ok((x, y))
    }
}

/// Mean over `strategies` x active pools containing each series. Each
/// component is clipped at zero and sorted across the grid before averaging.
#[allow(clippy::too_many_arguments)]
pub fn forecast_pooled(
    factory: &dyn LearnerFactory,
    panel: &Panel,
    train_end: usize,
    horizon: usize,
    grid: &QuantileGrid,
    strategies: &[Strategy],
    pools: &PoolAssignment,
    cfg: &StrategyConfig,
) -> Result<QuantileGridForecast> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be >= 1"));
    }
    if strategies.is_empty() {
        return Err(Error::EmptyInput("no strategies".into()));
    }
    if train_end == 0 || train_end > panel.len() {
        return Err(Error::invalid(format!("training end {train_end} outside panel")));
    }
    let ids: Vec<String> = panel.series.iter().map(|s| s.series_id.clone()).collect();
    let cover = pools.coverage(&ids)?;
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let prepared: Vec<Prepared> = (0..panel.n_series())
        .map(|i| prepare(panel, i, train_end, cfg.scale))
        .collect();
    // components[i] collects (strategy, pool) forecasts for series i
    let mut components: Vec<Vec<Vec<Vec<f64>>>> = vec![Vec::new(); ids.len()];
    for pool in pools.active() {
        let member_idx: Vec<usize> = pool.members.iter().map(|m| index[m.as_str()]).collect();
        for out in pool_outputs(factory, &prepared, &member_idx, &pool.id, train_end, horizon, grid, strategies, cfg)? {
            for (m, &i) in member_idx.iter().enumerate() {
                components[i].push(out[m].clone());
            }
        }
    }
    let mut fc = QuantileGridForecast::zeros(ids, horizon, grid.clone());
    let mut cell = Vec::new();
    for (i, comps) in components.iter().enumerate() {
        debug_assert_eq!(comps.len(), cover[i].len() * strategies.len());
        let k = comps.len() as f64;
        for h in 0..horizon {
            for qi in 0..grid.len() {
                cell.clear();
                cell.extend(comps.iter().map(|c| c[h][qi]));
                cell.sort_by(f64::total_cmp);
                let mean = cell.iter().sum::<f64>() / k;
                fc.set(i, h, qi, mean);
            }
        }
    }
    fc.finalize();
    Ok(fc)
}

#[allow(clippy::too_many_arguments)]
fn pool_outputs(
    factory: &dyn LearnerFactory,
    prepared: &[Prepared],
    member_idx: &[usize],
    pool_id: &str,
    train_end: usize,
    horizon: usize,
    grid: &QuantileGrid,
    strategies: &[Strategy],
    cfg: &StrategyConfig,
) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
    let job = PoolJob {
        members: member_idx.iter().map(|&i| &prepared[i]).collect(),
        one_hot: member_idx.len() > 1 && member_idx.len() <= cfg.max_one_hot,
        seed: cfg.seed ^ stable_hash(pool_id),
        label: pool_id.to_string(),
    };
    strategies
        .iter()
        .map(|&strategy| {
            let mut out = job.run(strategy, factory, cfg, train_end, horizon, grid)?;
            for (m, &i) in member_idx.iter().enumerate() {
                for cell in out[m].iter_mut() {
                    for v in cell.iter_mut() {
                        *v = (*v * prepared[i].scale).max(0.0);
                    }
                    cell.sort_by(f64::total_cmp);
                }
            }
            Ok(out)
        })
        .collect()
}

/// Forecasts for the members of a single pool trained on that pool alone,
/// averaged over `strategies` and finalized. Rows follow `pool.members`.
#[allow(clippy::too_many_arguments)]
pub fn forecast_pool(
    factory: &dyn LearnerFactory,
    panel: &Panel,
    train_end: usize,
    horizon: usize,
    grid: &QuantileGrid,
    strategies: &[Strategy],
    pool: &Pool,
    cfg: &StrategyConfig,
) -> Result<QuantileGridForecast> {
    if horizon == 0 || strategies.is_empty() || pool.members.is_empty() {
        return Err(Error::invalid("need a horizon, strategies and pool members"));
    }
    if train_end == 0 || train_end > panel.len() {
        return Err(Error::invalid(format!("training end {train_end} outside panel")));
    }
    let member_idx: Vec<usize> = pool
        .members
        .iter()
        .map(|m| {
            panel
                .series
                .iter()
                .position(|s| &s.series_id == m)
                .ok_or_else(|| Error::data(format!("pool {} names unknown series {m}", pool.id)))
        })
        .collect::<Result<_>>()?;
    let prepared: Vec<Prepared> = member_idx
        .iter()
        .map(|&i| prepare(panel, i, train_end, cfg.scale))
        .collect();
    let local: Vec<usize> = (0..member_idx.len()).collect();
    let outs = pool_outputs(factory, &prepared, &local, &pool.id, train_end, horizon, grid, strategies, cfg)?;
    let mut fc = QuantileGridForecast::zeros(pool.members.clone(), horizon, grid.clone());
    let k = outs.len() as f64;
    let mut cell = Vec::new();
    for m in 0..prepared.len() {
        for h in 0..horizon {
            for qi in 0..grid.len() {
                cell.clear();
                cell.extend(outs.iter().map(|o| o[m][h][qi]));
                cell.sort_by(f64::total_cmp);
                fc.set(m, h, qi, cell.iter().sum::<f64>() / k);
            }
        }
    }
    fc.finalize();
    Ok(fc)
}

pub fn forecast_direct(
    factory: &dyn LearnerFactory,
    panel: &Panel,
    train_end: usize,
    horizon: usize,
    grid: &QuantileGrid,
    pools: &PoolAssignment,
    cfg: &StrategyConfig,
) -> Result<QuantileGridForecast> {
    forecast_pooled(factory, panel, train_end, horizon, grid, &[Strategy::Dir], pools, cfg)
}

pub fn forecast_recursive(
    factory: &dyn LearnerFactory,
    panel: &Panel,
    train_end: usize,
    horizon: usize,
    grid: &QuantileGrid,
    pools: &PoolAssignment,
    cfg: &StrategyConfig,
) -> Result<QuantileGridForecast> {
    forecast_pooled(factory, panel, train_end, horizon, grid, &[Strategy::Rec], pools, cfg)
}

pub fn forecast_hybrid(
    factory: &dyn LearnerFactory,
    panel: &Panel,
    train_end: usize,
    horizon: usize,
    grid: &QuantileGrid,
    pools: &PoolAssignment,
    cfg: &StrategyConfig,
) -> Result<QuantileGridForecast> {
    forecast_pooled(factory, panel, train_end, horizon, grid, &[Strategy::Hyb], pools, cfg)
}

/// Direct-recursive average over the active pools of each series.
pub fn drfam_pp(
    factory: &dyn LearnerFactory,
    panel: &Panel,
    train_end: usize,
    horizon: usize,
    grid: &QuantileGrid,
    pools: &PoolAssignment,
    cfg: &StrategyConfig,
) -> Result<QuantileGridForecast> {
    forecast_pooled(factory, panel, train_end, horizon, grid, &[Strategy::Dir, Strategy::Rec], pools, cfg)
}
