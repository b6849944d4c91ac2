//! Statistical benchmark forecasters.
//!
//! Quantile bands come from empirical h-step residuals of the same
//! forecaster re-run at every feasible in-sample origin, added to the point
//! path, clipped at zero and sorted across the grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::QuantileGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BaselineKind {
    Naive,
    Snaive,
    Ma { window: usize },
    Ses { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    #[serde(flatten)]
    pub kind: BaselineKind,
    #[serde(default = "default_season")]
    pub season_length: usize,
}

fn default_season() -> usize {
    12
}

pub const MIN_RESIDUALS: usize = 8;

impl BaselineConfig {
    pub fn new(kind: BaselineKind) -> Self {
        Self {
            kind,
            season_length: 12,
        }
    }

    pub fn naive() -> Self {
        Self::new(BaselineKind::Naive)
    }

    pub fn snaive(season_length: usize) -> Self {
        Self {
            kind: BaselineKind::Snaive,
            season_length,
        }
    }

    pub fn ma(window: usize) -> Self {
        Self::new(BaselineKind::Ma { window })
    }

    pub fn ses(alpha: f64) -> Self {
        Self::new(BaselineKind::Ses { alpha })
    }

    pub fn name(&self) -> String {
        match self.kind {
            BaselineKind::Naive => "naive".into(),
            BaselineKind::Snaive => "snaive".into(),
            BaselineKind::Ma { window } => format!("ma{window}"),
            BaselineKind::Ses { .. } => "ses".into(),
        }
    }

    /// Observations needed before a point forecast exists.
    pub fn min_history(&self) -> usize {
        match self.kind {
            BaselineKind::Naive | BaselineKind::Ses { .. } => 1,
            BaselineKind::Snaive => self.season_length,
            BaselineKind::Ma { window } => window,
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            BaselineKind::Ma { window: 0 } => Err(Error::invalid("MA window must be >= 1")),
            BaselineKind::Ses { alpha } if !(alpha > 0.0 && alpha <= 1.0) => {
                Err(Error::invalid(format!("SES alpha {alpha} outside (0,1]")))
            }
            BaselineKind::Snaive if self.season_length == 0 => {
                Err(Error::invalid("season length must be >= 1"))
            }
            _ => Ok(()),
        }
    }
}

pub fn forecast_point(cfg: &BaselineConfig, insample: &[f64], horizon: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = insample.len();
    if n < cfg.min_history() || n == 0 {
        return Err(Error::InsufficientHistory {
            needed: cfg.min_history().max(1),
            available: n,
        });
    }
    Ok(match cfg.kind {
        BaselineKind::Naive => vec![insample[n - 1]; horizon],
        BaselineKind::Snaive => {
            let m = cfg.season_length;
            (0..horizon).map(|h| insample[n - m + h % m]).collect()
        }
        BaselineKind::Ma { window } => {
            let mean = insample[n - window..].iter().sum::<f64>() / window as f64;
            vec![mean; horizon]
        }
        BaselineKind::Ses { alpha } => {
            let level = insample[1..]
                .iter()
                .fold(insample[0], |l, &y| alpha * y + (1.0 - alpha) * l);
            vec![level; horizon]
        }
    })
}

/// Linear-interpolation sample quantile of a sorted slice.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// In-sample h-step residuals `y[o+h-1] - forecast_h(y[..o])` for every
/// feasible origin, one vector per step.
pub fn residuals_by_step(cfg: &BaselineConfig, insample: &[f64], horizon: usize) -> Result<Vec<Vec<f64>>> {
    let start = cfg.min_history().max(1);
    let mut out = vec![Vec::new(); horizon];
    for origin in start..insample.len() {
        let path = forecast_point(cfg, &insample[..origin], horizon)?;
        for (h, f) in path.iter().enumerate() {
            if let Some(&y) = insample.get(origin + h) {
                out[h].push(y - f);
            }
        }
    }
    Ok(out)
}

/// Point path plus empirical residual quantiles; values are `[step][quantile]`.
pub fn forecast_quantiles(
    cfg: &BaselineConfig,
    insample: &[f64],
    horizon: usize,
    grid: &QuantileGrid,
) -> Result<Vec<Vec<f64>>> {
    let point = forecast_point(cfg, insample, horizon)?;
    let mut residuals = residuals_by_step(cfg, insample, horizon)?;
    let mut out = Vec::with_capacity(horizon);
    for (h, res) in residuals.iter_mut().enumerate() {
        if res.len() < MIN_RESIDUALS {
            return Err(Error::InsufficientHistory {
                needed: MIN_RESIDUALS,
                available: res.len(),
            });
        }
        res.sort_by(f64::total_cmp);
        let mut row: Vec<f64> = grid
            .as_slice()
            .iter()
            .map(|&q| (point[h] + empirical_quantile(res, q)).max(0.0))
            .collect();
        row.sort_by(f64::total_cmp);
        out.push(row);
    }
    Ok(out)
}
