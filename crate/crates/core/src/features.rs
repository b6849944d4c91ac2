//! Leakage-safe feature construction.
//!
//! Every autoregressive value for time `t` reads only `y[..t]`; calendar
//! columns read only the timestamp of `t`. The column builders
//! ([`lag_features`], [`rolling_features`], [`avm`], [`wdi`]) and the
//! per-row builder used by the forecasting strategies ([`FeatureSpec::row`])
//! share the same window helpers, so training rows and forecast-time rows
//! agree by construction.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::Month;

/// Covariate name under which aggregate series carry the summed AVM of
/// their leaves.
pub const AVM_COVARIATE: &str = "avm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Lag,
    Rolling,
    Calendar,
    Avm,
    Wdi,
    Exogenous,
    Member,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureColumn {
    pub name: String,
    pub provenance: Provenance,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureMatrix {
    pub columns: Vec<FeatureColumn>,
}

impl FeatureMatrix {
    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn column(&self, name: &str) -> Option<&FeatureColumn> {
        self.columns.iter().find(|c| c.name == name)
    }
}

/// `values[end-k..end]`, if that much history exists.
pub fn trailing_window(values: &[f64], end: usize, k: usize) -> Option<&[f64]> {
    (k >= 1 && end >= k && end <= values.len()).then(|| &values[end - k..end])
}

/// One-sided k-period moving average of `values[..end]`.
pub fn trailing_mean(values: &[f64], end: usize, k: usize) -> Option<f64> {
    trailing_window(values, end, k).map(|w| w.iter().sum::<f64>() / k as f64)
}

fn trailing_mean_opt(values: &[Option<f64>], end: usize, k: usize) -> Option<f64> {
    if k == 0 || end < k || end > values.len() {
        return None;
    }
    let mut sum = 0.0;
    for v in &values[end - k..end] {
        sum += (*v)?;
    }
    Some(sum / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RollingStat {
    Min,
    Max,
    Mean,
    Std,
}

impl RollingStat {
    fn label(self) -> &'static str {
        match self {
            RollingStat::Min => "min",
            RollingStat::Max => "max",
            RollingStat::Mean => "mean",
            RollingStat::Std => "std",
        }
    }

    pub fn apply(self, window: &[f64]) -> f64 {
        let n = window.len() as f64;
        match self {
            RollingStat::Min => window.iter().copied().fold(f64::INFINITY, f64::min),
            RollingStat::Max => window.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            RollingStat::Mean => window.iter().sum::<f64>() / n,
            RollingStat::Std => {
                let mean = window.iter().sum::<f64>() / n;
                (window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
            }
        }
    }
}

pub fn lag_value(values: &[f64], t: usize, k: usize) -> Option<f64> {
    (k >= 1 && t >= k && t - k < values.len()).then(|| values[t - k])
}

pub fn rolling_value(values: &[f64], t: usize, w: usize, stat: RollingStat) -> Option<f64> {
    trailing_window(values, t, w).map(|win| stat.apply(win))
}

/// Age of a product at `month` in whole months; never negative.
pub fn age_at(month: Month, intro: Month) -> f64 {
    month.since(intro).max(0) as f64
}

/// `age * S_k(y[..t])`, 0 at or before introduction.
pub fn avm_value(target: &[f64], t: usize, age: f64, k: usize) -> Option<f64> {
    if age <= 0.0 {
        return Some(0.0);
    }
    trailing_mean(target, t, k).map(|s| age * s)
}

pub fn wdi_value(visits: &[Option<f64>], target: &[f64], t: usize, k: usize) -> Option<f64> {
    Some(trailing_mean_opt(visits, t, k)? * trailing_mean(target, t, k)?)
}

pub fn lag_features(target: &[f64], lags: &[usize]) -> Vec<FeatureColumn> {
    lags.iter()
        .map(|&k| FeatureColumn {
            name: format!("lag_{k}"),
            provenance: Provenance::Lag,
            values: (0..target.len()).map(|t| lag_value(target, t, k)).collect(),
        })
        .collect()
}

pub fn rolling_features(target: &[f64], windows: &[usize], stats: &[RollingStat]) -> Vec<FeatureColumn> {
    let mut out = Vec::with_capacity(windows.len() * stats.len());
    for &w in windows {
        for &stat in stats {
            out.push(FeatureColumn {
                name: format!("roll_{}_{w}", stat.label()),
                provenance: Provenance::Rolling,
                values: (0..target.len())
                    .map(|t| rolling_value(target, t, w, stat))
                    .collect(),
            });
        }
    }
    out
}

/// Age-volume moment column for a series introduced at `intro`.
pub fn avm(target: &[f64], timestamps: &[Month], intro: Month, k: usize) -> Result<FeatureColumn> {
    Error::check_len(timestamps.len(), target.len())?;
    if k == 0 {
        return Err(Error::invalid("AVM smoother needs k >= 1"));
    }
    if let Some(&last) = timestamps.last() {
        if intro > last {
            return Err(Error::invalid(format!(
                "introduction {intro} after panel end {last}"
            )));
        }
    }
    Ok(FeatureColumn {
        name: "avm".into(),
        provenance: Provenance::Avm,
        values: timestamps
            .iter()
            .enumerate()
            .map(|(t, &m)| avm_value(target, t, age_at(m, intro), k))
            .collect(),
    })
}

/// Web-traffic/demand interaction; absent while either smoother lacks history.
pub fn wdi(visits: &[Option<f64>], target: &[f64], k: usize) -> Result<FeatureColumn> {
    Error::check_len(target.len(), visits.len())?;
    Ok(FeatureColumn {
        name: "wdi".into(),
        provenance: Provenance::Wdi,
        values: (0..target.len()).map(|t| wdi_value(visits, target, t, k)).collect(),
    })
}

/// Elementwise sum of aligned columns; absent if any input is absent.
/// Upper-level AVM and WDI are defined this way.
pub fn sum_columns(columns: &[&FeatureColumn]) -> Result<FeatureColumn> {
    let first = columns
        .first()
        .ok_or_else(|| Error::EmptyInput("no columns to sum".into()))?;
    let n = first.values.len();
    let mut values = vec![Some(0.0); n];
    for c in columns {
        Error::check_len(n, c.values.len())?;
        for (acc, v) in values.iter_mut().zip(&c.values) {
            *acc = match (*acc, v) {
                (Some(a), Some(v)) => Some(a + v),
                _ => None,
            };
        }
    }
    Ok(FeatureColumn {
        name: first.name.clone(),
        provenance: first.provenance,
        values,
    })
}

pub fn month_sinusoids(m: Month) -> [f64; 4] {
    let a = 2.0 * PI * m.month() as f64 / 12.0;
    let b = 2.0 * PI * m.month_of_quarter() as f64 / 3.0;
    [a.sin(), a.cos(), b.sin(), b.cos()]
}

/// Month and month-of-quarter sinusoids, then one-hot quarter and one-hot
/// year over `years` (a year outside the list gets all zeros).
pub fn calendar_features(timestamps: &[Month], years: &[i32]) -> Vec<FeatureColumn> {
    let mut cols: Vec<FeatureColumn> = ["month_sin", "month_cos", "moq_sin", "moq_cos"]
        .iter()
        .enumerate()
        .map(|(k, name)| FeatureColumn {
            name: (*name).into(),
            provenance: Provenance::Calendar,
            values: timestamps.iter().map(|&m| Some(month_sinusoids(m)[k])).collect(),
        })
        .collect();
    for q in 1..=4u32 {
        cols.push(FeatureColumn {
            name: format!("quarter_{q}"),
            provenance: Provenance::Calendar,
            values: timestamps
                .iter()
                .map(|m| Some(if m.quarter() == q { 1.0 } else { 0.0 }))
                .collect(),
        });
    }
    for &y in years {
        cols.push(FeatureColumn {
            name: format!("year_{y}"),
            provenance: Provenance::Calendar,
            values: timestamps
                .iter()
                .map(|m| Some(if m.year() == y { 1.0 } else { 0.0 }))
                .collect(),
        });
    }
    cols
}

/// First differences with the anchor needed to undo them.
#[derive(Debug, Clone, PartialEq)]
pub struct Differenced {
    pub diffs: Vec<Option<f64>>,
    pub anchor: f64,
}

impl Differenced {
    /// Levels `y[1..]` rebuilt from the anchor.
    pub fn inverse(&self) -> Vec<f64> {
        let diffs: Vec<f64> = self.diffs.iter().skip(1).map(|d| d.unwrap_or(0.0)).collect();
        integrate(self.anchor, &diffs)
    }
}

pub fn difference(target: &[f64]) -> Result<Differenced> {
    if target.len() < 2 {
        return Err(Error::InsufficientHistory {
            needed: 2,
            available: target.len(),
        });
    }
    let mut diffs = vec![None];
    diffs.extend(target.windows(2).map(|w| Some(w[1] - w[0])));
    Ok(Differenced {
        diffs,
        anchor: target[0],
    })
}

/// Cumulative sum of `diffs` starting from `anchor` (exclusive).
pub fn integrate(anchor: f64, diffs: &[f64]) -> Vec<f64> {
    diffs
        .iter()
        .scan(anchor, |level, d| {
            *level += d;
            Some(*level)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Absent values become -1 (tree-style learners).
    Sentinel,
    /// Exogenous covariates are forward-filled; what remains becomes -1.
    ForwardFill,
}

pub const SENTINEL: f64 = -1.0;

/// Forward-fills gaps; leading gaps stay absent.
pub fn forward_fill(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut last = None;
    values
        .iter()
        .map(|v| {
            if v.is_some() {
                last = *v;
            }
            last
        })
        .collect()
}

/// Declarative feature set used to build learner inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub lags: Vec<usize>,
    pub rolling_windows: Vec<usize>,
    pub rolling_stats: Vec<RollingStat>,
    pub calendar: bool,
    /// Smoother length for AVM; `None` disables it.
    pub avm_k: Option<usize>,
    /// Visits covariate and smoother length for WDI.
    pub wdi: Option<(String, usize)>,
    /// Covariates entered as-is (at their last known value).
    pub exogenous: Vec<String>,
    pub missing: MissingPolicy,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            lags: vec![1, 2, 3, 6, 12],
            rolling_windows: vec![1, 3, 6],
            rolling_stats: vec![RollingStat::Min, RollingStat::Max],
            calendar: true,
            avm_k: Some(3),
            wdi: Some(("visits".into(), 3)),
            exogenous: Vec::new(),
            missing: MissingPolicy::Sentinel,
        }
    }
}

/// Read-only view of one series for row construction. `target` may extend
/// past the observed range with predictions; covariates never do.
#[derive(Debug, Clone, Copy)]
pub struct SeriesView<'a> {
    pub target: &'a [f64],
    pub start: Month,
    pub intro: Option<Month>,
    pub covariates: &'a BTreeMap<String, Vec<Option<f64>>>,
}

impl SeriesView<'_> {
    pub fn covariate(&self, name: &str) -> Option<&[Option<f64>]> {
        self.covariates.get(name).map(Vec::as_slice)
    }
}

impl FeatureSpec {
    /// Plain autoregressive lags only.
    pub fn lags_only(lags: Vec<usize>) -> Self {
        Self {
            lags,
            rolling_windows: Vec::new(),
            rolling_stats: Vec::new(),
            calendar: false,
            avm_k: None,
            wdi: None,
            exogenous: Vec::new(),
            missing: MissingPolicy::Sentinel,
        }
    }

    /// Rows before this index lack full autoregressive history.
    pub fn warmup(&self) -> usize {
        let lag = self.lags.iter().copied().max().unwrap_or(0);
        let roll = self.rolling_windows.iter().copied().max().unwrap_or(0);
        let avm = self.avm_k.unwrap_or(0);
        let wdi = self.wdi.as_ref().map_or(0, |w| w.1);
        lag.max(roll).max(avm).max(wdi).max(1)
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.lags.iter().map(|k| format!("lag_{k}")).collect();
        for w in &self.rolling_windows {
            for s in &self.rolling_stats {
                names.push(format!("roll_{}_{w}", s.label()));
            }
        }
        if self.calendar {
            names.extend(["month_sin", "month_cos", "moq_sin", "moq_cos"].map(String::from));
            names.extend((1..=4).map(|q| format!("quarter_{q}")));
        }
        if self.avm_k.is_some() {
            names.push("avm".into());
        }
        if self.wdi.is_some() {
            names.push("wdi".into());
        }
        names.extend(self.exogenous.iter().map(|e| format!("x_{e}")));
        names
    }

    fn impute(&self, v: Option<f64>) -> f64 {
        v.unwrap_or(SENTINEL)
    }

    fn exog(&self, col: Option<&[Option<f64>]>, at: usize) -> Option<f64> {
        let col = col?;
        match self.missing {
            MissingPolicy::Sentinel => col.get(at).copied().flatten(),
            MissingPolicy::ForwardFill => col[..=at.min(col.len().saturating_sub(1))]
                .iter()
                .rev()
                .find_map(|v| *v),
        }
    }

    /// Feature row for predicting `target[target_t]`.
    ///
    /// Autoregressive columns read `target[..ar_end]`; covariates are read
    /// at index `exog_at` (the last month whose covariates are known);
    /// calendar and age use the month of `target_t`.
    pub fn row(&self, view: &SeriesView<'_>, ar_end: usize, exog_at: usize, target_t: usize) -> Vec<f64> {
        let y = view.target;
        let mut row = Vec::with_capacity(self.names().len());
        for &k in &self.lags {
            row.push(self.impute(lag_value(y, ar_end, k)));
        }
        for &w in &self.rolling_windows {
            for &s in &self.rolling_stats {
                row.push(self.impute(rolling_value(y, ar_end, w, s)));
            }
        }
        let month = view.start.offset(target_t as i32);
        if self.calendar {
            row.extend(month_sinusoids(month));
            for q in 1..=4 {
                row.push(if month.quarter() == q { 1.0 } else { 0.0 });
            }
        }
        if let Some(k) = self.avm_k {
            let v = match view.intro {
                Some(intro) => avm_value(y, ar_end, age_at(month, intro), k),
                None => self.exog(view.covariate(AVM_COVARIATE), exog_at),
            };
            row.push(self.impute(v));
        }
        if let Some((name, k)) = &self.wdi {
            let v = view.covariate(name).and_then(|visits| {
                // visits known through exog_at; demand through ar_end
                let visit_end = (exog_at + 1).min(visits.len());
                Some(trailing_mean_opt(visits, visit_end, *k)? * trailing_mean(y, ar_end, *k)?)
            });
            row.push(self.impute(v));
        }
        for e in &self.exogenous {
            row.push(self.impute(self.exog(view.covariate(e), exog_at)));
        }
        row
    }
}
