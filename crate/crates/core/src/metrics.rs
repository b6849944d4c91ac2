//! Scaled point and probabilistic accuracy metrics and the demand-pattern
//! classifier.
//!
//! The scale terms of RMSSE and SPL are in-sample one-step naive errors
//! taken only over periods with non-zero demand (`y_t != 0`). A zero or
//! empty scale is reported as [`Error::UndefinedMetric`], never as inf/NaN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The default nine-point grid: median plus the 50/67/95/99% intervals.
pub const DEFAULT_QUANTILES: [f64; 9] = [0.005, 0.025, 0.165, 0.25, 0.5, 0.75, 0.835, 0.975, 0.995];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileGrid(Vec<f64>);

impl QuantileGrid {
    pub fn new(quantiles: Vec<f64>) -> Result<Self> {
        if quantiles.is_empty() {
            return Err(Error::EmptyInput("quantile grid".into()));
        }
        if quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(Error::invalid(format!("quantiles must lie in (0,1): {quantiles:?}")));
        }
        if quantiles.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "quantiles must be strictly increasing: {quantiles:?}"
            )));
        }
        Ok(Self(quantiles))
    }

    pub fn median_only() -> Self {
        Self(vec![0.5])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the quantile closest to 0.5.
    pub fn median_index(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

impl Default for QuantileGrid {
    fn default() -> Self {
        Self(DEFAULT_QUANTILES.to_vec())
    }
}

impl TryFrom<Vec<f64>> for QuantileGrid {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuantileGrid> for Vec<f64> {
    fn from(g: QuantileGrid) -> Self {
        g.0
    }
}

/// In-sample history and hold-out actuals of one series.
#[derive(Debug, Clone, Copy)]
pub struct MetricInput<'a> {
    insample: &'a [f64],
    actual: &'a [f64],
}

impl<'a> MetricInput<'a> {
    pub fn new(insample: &'a [f64], actual: &'a [f64]) -> Result<Self> {
        if insample.len() < 2 {
            return Err(Error::InsufficientHistory {
                needed: 2,
                available: insample.len(),
            });
        }
        if actual.is_empty() {
            return Err(Error::EmptyInput("actuals".into()));
        }
        Ok(Self { insample, actual })
    }

    pub fn insample(&self) -> &[f64] {
        self.insample
    }

    pub fn actual(&self) -> &[f64] {
        self.actual
    }

    pub fn horizon(&self) -> usize {
        self.actual.len()
    }

    fn check(&self, forecast: &[f64]) -> Result<()> {
        Error::check_len(self.actual.len(), forecast.len())
    }

    /// Mean of `f(y_t - y_{t-1})` over t >= 2 with `y_t != 0`.
    fn naive_scale(&self, f: impl Fn(f64) -> f64) -> Result<f64> {
        let (sum, count) = self
            .insample
            .windows(2)
            .filter(|w| w[1] != 0.0)
            .fold((0.0, 0usize), |(s, c), w| (s + f(w[1] - w[0]), c + 1));
        if count == 0 || sum == 0.0 {
            return Err(Error::UndefinedMetric(
                "in-sample naive errors are all zero".into(),
            ));
        }
        Ok(sum / count as f64)
    }
}

pub fn rmsse(m: &MetricInput<'_>, forecast: &[f64]) -> Result<f64> {
    m.check(forecast)?;
    let scale = m.naive_scale(|d| d * d)?;
    let mse = m
        .actual
        .iter()
        .zip(forecast)
        .map(|(y, f)| (y - f).powi(2))
        .sum::<f64>()
        / m.horizon() as f64;
    Ok((mse / scale).sqrt())
}

pub fn wmape(m: &MetricInput<'_>, forecast: &[f64]) -> Result<f64> {
    m.check(forecast)?;
    let denom: f64 = m.actual.iter().map(|y| y.abs()).sum();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("actuals are all zero".into()));
    }
    let num: f64 = m.actual.iter().zip(forecast).map(|(y, f)| (y - f).abs()).sum();
    Ok(num / denom)
}

/// Positive values mean under-forecasting.
pub fn forecast_bias(m: &MetricInput<'_>, forecast: &[f64]) -> Result<f64> {
    m.check(forecast)?;
    let denom: f64 = m.actual.iter().sum();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("actuals sum to zero".into()));
    }
    let num: f64 = m.actual.iter().zip(forecast).map(|(y, f)| y - f).sum();
    Ok(num / denom)
}

pub fn pinball(y: f64, forecast: f64, q: f64) -> f64 {
    if forecast <= y {
        (y - forecast) * q
    } else {
        (forecast - y) * (1.0 - q)
    }
}

/// Scaled pinball loss of the quantile-`q` path.
pub fn spl(m: &MetricInput<'_>, q: f64, forecast: &[f64]) -> Result<f64> {
    m.check(forecast)?;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("quantile {q} outside (0,1)")));
    }
    let scale = m.naive_scale(f64::abs)?;
    let loss = m
        .actual
        .iter()
        .zip(forecast)
        .map(|(&y, &f)| pinball(y, f, q))
        .sum::<f64>()
        / m.horizon() as f64;
    Ok(loss / scale)
}

/// Unweighted mean of SPL over the grid; `paths[k]` is the path for `grid[k]`.
pub fn mspl(m: &MetricInput<'_>, grid: &QuantileGrid, paths: &[Vec<f64>]) -> Result<f64> {
    Error::check_len(grid.len(), paths.len())?;
    let mut total = 0.0;
    for (&q, path) in grid.as_slice().iter().zip(paths) {
        total += spl(m, q, path)?;
    }
    Ok(total / grid.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemandClass {
    Smooth,
    Intermittent,
    Erratic,
    Lumpy,
}

pub const ADI_CUTOFF: f64 = 1.32;
pub const CV2_CUTOFF: f64 = 0.49;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemandProfile {
    /// Periods per non-zero demand occurrence.
    pub adi: f64,
    /// Squared coefficient of variation of non-zero demand sizes.
    pub cv2: f64,
    pub class: DemandClass,
}

pub fn classify_demand(insample: &[f64]) -> Result<DemandProfile> {
    if insample.len() < 4 {
        return Err(Error::InsufficientHistory {
            needed: 4,
            available: insample.len(),
        });
    }
    let sizes: Vec<f64> = insample.iter().copied().filter(|&y| y != 0.0).collect();
    if sizes.is_empty() {
        return Err(Error::UndefinedMetric("series has no demand".into()));
    }
    let adi = insample.len() as f64 / sizes.len() as f64;
    let n = sizes.len() as f64;
    let mean = sizes.iter().sum::<f64>() / n;
    let var = sizes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let cv2 = var / (mean * mean);
    let class = match (adi > ADI_CUTOFF, cv2 > CV2_CUTOFF) {
        (false, false) => DemandClass::Smooth,
        (true, false) => DemandClass::Intermittent,
        (false, true) => DemandClass::Erratic,
        (true, true) => DemandClass::Lumpy,
    };
    Ok(DemandProfile { adi, cv2, class })
}

/// Per-level unweighted mean of per-series scores. `scores` pairs a level
/// index with a score; every level in `0..n_levels` must receive one.
pub fn two_stage_average(scores: &[(usize, f64)], n_levels: usize) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; n_levels];
    let mut counts = vec![0usize; n_levels];
    for &(level, score) in scores {
        if level >= n_levels {
            return Err(Error::invalid(format!("level {level} >= {n_levels}")));
        }
        sums[level] += score;
        counts[level] += 1;
    }
    sums.iter()
        .zip(&counts)
        .enumerate()
        .map(|(level, (s, &c))| {
            if c == 0 {
                Err(Error::EmptyInput(format!("no scores for level {level}")))
            } else {
                Ok(s / c as f64)
            }
        })
        .collect()
}
