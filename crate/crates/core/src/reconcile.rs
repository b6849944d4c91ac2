//! Coherence-restoring reconciliation.
//!
//! Vectors are full N-vectors in summing-matrix row order. REC-MILP solves
//! each horizon step separately; two exact backends are available: the
//! generic branch-and-bound in [`crate::milp`] and a tree dynamic program
//! over convex piecewise-linear node costs, which is exact for strictly
//! nested hierarchies and scales to large boxes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{aggregate_bottom, check_coherence, CoherenceReport, SummingMatrix};
use crate::milp::{solve_milp_with, MilpProblem, Relation, SolveStatus, SolverLimits};

pub const WMAPE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconWeights {
    pub gamma: Vec<f64>,
    /// Per-level weights summing to 1; used by the level-weighted variant.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
}

impl ReconWeights {
    pub fn uniform(n_series: usize) -> Self {
        Self {
            gamma: vec![1.0; n_series],
            alpha: None,
        }
    }

    pub fn validate(&self, s: &SummingMatrix) -> Result<()> {
        Error::check_len(s.n_series(), self.gamma.len())?;
        if self.gamma.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::invalid("gamma must be finite and nonnegative"));
        }
        if let Some(alpha) = &self.alpha {
            Error::check_len(s.n_levels(), alpha.len())?;
            let total: f64 = alpha.iter().sum();
            if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("alpha must be a probability vector over levels"));
            }
        }
        Ok(())
    }

    /// `w_i = gamma_i`, or `gamma_i * alpha_l(i)` when level-weighted.
    pub fn series_weights(&self, s: &SummingMatrix, level_weighted: bool) -> Result<Vec<f64>> {
        self.validate(s)?;
        if !level_weighted {
            return Ok(self.gamma.clone());
        }
        let alpha = self
            .alpha
            .as_ref()
            .ok_or_else(|| Error::invalid("level-weighted reconciliation needs alpha"))?;
        Ok(self
            .gamma
            .iter()
            .zip(s.row_levels())
            .map(|(g, &l)| g * alpha[l])
            .collect())
    }
}

/// `gamma_i = 1 / max(WMAPE_i, 1e-3)`.
pub fn gamma_from_validation(wmape: &[f64]) -> Vec<f64> {
    wmape.iter().map(|w| 1.0 / w.max(WMAPE_FLOOR)).collect()
}

/// Candidate level weights: bottom weight 0.0, 0.1, ..., 1.0 with the rest
/// split equally over the upper levels.
pub fn level_weight_grid(n_levels: usize) -> Vec<Vec<f64>> {
    if n_levels <= 1 {
        return vec![vec![1.0; n_levels]];
    }
    (0..=10)
        .map(|k| {
            let bottom = k as f64 / 10.0;
            let mut alpha = vec![(1.0 - bottom) / (n_levels - 1) as f64; n_levels];
            alpha[n_levels - 1] = bottom;
            alpha
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub sigma: Vec<Vec<f64>>,
    pub shrink_lambda: f64,
}

impl CovarianceSpec {
    pub fn new(sigma: DMatrix<f64>, shrink_lambda: f64) -> Self {
        Self {
            sigma: sigma.row_iter().map(|r| r.iter().copied().collect()).collect(),
            shrink_lambda,
        }
    }

    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.sigma.len();
        for row in &self.sigma {
            Error::check_len(n, row.len())?;
        }
        Ok(DMatrix::from_fn(n, n, |i, j| self.sigma[i][j]))
    }

    /// `(1 - lambda) * Sigma + lambda * diag(Sigma)`.
    pub fn shrunk(&self) -> Result<DMatrix<f64>> {
        if !(0.0..=1.0).contains(&self.shrink_lambda) {
            return Err(Error::invalid(format!(
                "shrink lambda {} outside [0,1]",
                self.shrink_lambda
            )));
        }
        let sigma = self.matrix()?;
        let n = sigma.nrows();
        for i in 0..n {
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-9 * (1.0 + sigma[(i, j)].abs()) {
                    return Err(Error::invalid("covariance is not symmetric"));
                }
            }
        }
        let lambda = self.shrink_lambda;
        Ok(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                sigma[(i, i)]
            } else {
                (1.0 - lambda) * sigma[(i, j)]
            }
        }))
    }

    /// `W = shrunk^-1`.
    pub fn weight_matrix(&self) -> Result<DMatrix<f64>> {
        let shrunk = self.shrunk()?;
        let chol = shrunk
            .cholesky()
            .ok_or_else(|| Error::LinearAlgebra("shrunk covariance is not positive definite".into()))?;
        Ok(chol.inverse())
    }
}

/// Empirical covariance (divisor T) of base-forecast errors, rows = time,
/// columns = series. Zero variances are floored so the shrunk matrix stays
/// positive definite.
pub fn estimate_covariance(errors: &[Vec<f64>], shrink_lambda: f64) -> Result<CovarianceSpec> {
    let t = errors.len();
    if t < 2 {
        return Err(Error::InsufficientHistory {
            needed: 2,
            available: t,
        });
    }
    let n = errors[0].len();
    for row in errors {
        Error::check_len(n, row.len())?;
    }
    let means: Vec<f64> = (0..n)
        .map(|j| errors.iter().map(|r| r[j]).sum::<f64>() / t as f64)
        .collect();
    let mut sigma = DMatrix::<f64>::zeros(n, n);
    for row in errors {
        for i in 0..n {
            let di = row[i] - means[i];
            for j in 0..=i {
                sigma[(i, j)] += di * (row[j] - means[j]);
            }
        }
    }
    let max_var = (0..n).map(|i| sigma[(i, i)] / t as f64).fold(0.0, f64::max);
    let floor = (max_var * 1e-6).max(1e-9);
    for i in 0..n {
        for j in 0..=i {
            let v = sigma[(i, j)] / t as f64;
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
        sigma[(i, i)] = sigma[(i, i)].max(floor);
    }
    Ok(CovarianceSpec::new(sigma, shrink_lambda))
}

/// Precomputed projection `P = S (S'WS)^-1 S'W`.
#[derive(Debug, Clone)]
pub struct Projector {
    matrix: DMatrix<f64>,
}

impl Projector {
    pub fn ols(s: &SummingMatrix) -> Result<Self> {
        let sm = s.entries();
        let gram = sm.transpose() * sm;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::LinearAlgebra("S is rank deficient".into()))?;
        let inner = chol.solve(&sm.transpose());
        Ok(Self { matrix: sm * inner })
    }

    pub fn mint(s: &SummingMatrix, cov: &CovarianceSpec) -> Result<Self> {
        let sm = s.entries();
        let w = cov.weight_matrix()?;
        Error::check_len(s.n_series(), w.nrows())?;
        let stw = sm.transpose() * &w;
        let gram = &stw * sm;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::LinearAlgebra("S'WS is not positive definite".into()))?;
        let inner = chol.solve(&stw);
        Ok(Self { matrix: sm * inner })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn apply(&self, base: &[f64]) -> Result<Vec<f64>> {
        Error::check_len(self.matrix.ncols(), base.len())?;
        let out = &self.matrix * DVector::from_column_slice(base);
        Ok(out.iter().copied().collect())
    }
}

pub fn reconcile_bu(s: &SummingMatrix, base: &[f64]) -> Result<Vec<f64>> {
    Error::check_len(s.n_series(), base.len())?;
    aggregate_bottom(s, &s.bottom_slice(base)?)
}

pub fn reconcile_ols(s: &SummingMatrix, base: &[f64]) -> Result<Vec<f64>> {
    Projector::ols(s)?.apply(base)
}

pub fn reconcile_mint(s: &SummingMatrix, base: &[f64], cov: &CovarianceSpec) -> Result<Vec<f64>> {
    Projector::mint(s, cov)?.apply(base)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rounded {
    pub values: Vec<f64>,
    pub coherence: CoherenceReport,
}

/// Half-up rounding per entry, then a coherence check (tol 0).
pub fn round_posthoc(s: &SummingMatrix, values: &[f64]) -> Result<Rounded> {
    let rounded: Vec<f64> = values.iter().map(|v| (v + 0.5).floor()).collect();
    let coherence = check_coherence(s, &rounded, 0.0)?;
    Ok(Rounded {
        values: rounded,
        coherence,
    })
}

/// `sum_i w_i |x_i - base_i|`.
pub fn weighted_l1(weights: &[f64], base: &[f64], x: &[f64]) -> f64 {
    weights
        .iter()
        .zip(base)
        .zip(x)
        .map(|((w, b), x)| w * (x - b).abs())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MilpBackend {
    BranchAndBound,
    TreeDp,
    /// Tree DP unless fixed values are requested.
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilpOptions {
    pub backend: MilpBackend,
    pub limits: SolverLimits,
    /// Optional `(series row, value)` equality constraints applied at every step.
    pub fixed: Vec<(usize, f64)>,
}

impl Default for MilpOptions {
    fn default() -> Self {
        Self {
            backend: MilpBackend::Auto,
            limits: SolverLimits::default(),
            fixed: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilpReconciliation {
    /// Integer coherent full vectors, one per step.
    pub values: Vec<Vec<f64>>,
    /// `(1/(N*H)) * sum_t sum_i w_i |x_it - base_it|`.
    pub objective: f64,
    /// Unnormalized weighted L1 per step.
    pub step_objectives: Vec<f64>,
    pub node_count: usize,
    pub seconds: f64,
}

/// Integer box for bottom variable j: `max(ceil(2 * max_t base_jt), 10)`.
pub fn bottom_box(s: &SummingMatrix, base: &[Vec<f64>]) -> Result<Vec<i64>> {
    let mut hi = vec![10i64; s.n_bottom()];
    for step in base {
        for (j, b) in s.bottom_slice(step)?.iter().enumerate() {
            hi[j] = hi[j].max((2.0 * b).ceil() as i64);
        }
    }
    Ok(hi)
}

pub fn reconcile_milp(
    s: &SummingMatrix,
    base: &[Vec<f64>],
    weights: &ReconWeights,
    level_weighted: bool,
    opts: &MilpOptions,
) -> Result<MilpReconciliation> {
    let start = Instant::now();
    if base.is_empty() {
        return Err(Error::EmptyInput("no horizon steps to reconcile".into()));
    }
    for step in base {
        Error::check_len(s.n_series(), step.len())?;
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("base forecasts must be finite"));
        }
    }
    let w = weights.series_weights(s, level_weighted)?;
    let hi = bottom_box(s, base)?;
    for &(row, v) in &opts.fixed {
        if row >= s.n_series() || v < 0.0 || v.fract() != 0.0 {
            return Err(Error::invalid(format!("fixed value {v} for row {row} is not admissible")));
        }
    }
    let use_dp = match opts.backend {
        MilpBackend::TreeDp => {
            if !opts.fixed.is_empty() {
                return Err(Error::invalid("tree DP backend does not support fixed values"));
            }
            true
        }
        MilpBackend::BranchAndBound => false,
        MilpBackend::Auto => opts.fixed.is_empty(),
    };
    let solved: Vec<Result<(Vec<f64>, usize)>> = base
        .par_iter()
        .enumerate()
        .map(|(t, step)| {
            let bottom = if use_dp {
                Ok((tree_dp(s, step, &w, &hi), 0))
            } else {
                branch_and_bound(s, step, &w, &hi, &opts.fixed, opts.limits).map_err(|e| match e {
                    Error::Solver { status, .. } => Error::Solver {
                        context: format!("REC-MILP step {}", t + 1),
                        status,
                    },
                    other => other,
                })
            }?;
            Ok((aggregate_bottom(s, &bottom.0)?, bottom.1))
        })
        .collect();
    let mut values = Vec::with_capacity(base.len());
    let mut step_objectives = Vec::with_capacity(base.len());
    let mut node_count = 0;
    for (r, step) in solved.into_iter().zip(base) {
        let (full, nodes) = r?;
        step_objectives.push(weighted_l1(&w, step, &full));
        node_count += nodes;
        values.push(full);
    }
    let objective = step_objectives.iter().sum::<f64>() / (s.n_series() * base.len()) as f64;
    Ok(MilpReconciliation {
        values,
        objective,
        step_objectives,
        node_count,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn branch_and_bound(
    s: &SummingMatrix,
    base: &[f64],
    w: &[f64],
    hi: &[i64],
    fixed: &[(usize, f64)],
    limits: SolverLimits,
) -> Result<(Vec<f64>, usize)> {
    let (n, m) = (s.n_bottom(), s.n_series());
    // variables: b_0..b_{n-1}, then z_0..z_{m-1}
    let mut p = MilpProblem::new(n + m);
    for (j, &h) in hi.iter().enumerate() {
        p.set_integer(j, 0.0, h as f64);
    }
    for i in 0..m {
        p.objective[n + i] = w[i];
        let members: Vec<usize> = (0..n).filter(|&j| s.get(i, j)).collect();
        let mut plus: Vec<(usize, f64)> = vec![(n + i, 1.0)];
        plus.extend(members.iter().map(|&j| (j, -1.0)));
        p.add_constraint(plus, Relation::Ge, -base[i]);
        let mut minus: Vec<(usize, f64)> = vec![(n + i, 1.0)];
        minus.extend(members.iter().map(|&j| (j, 1.0)));
        p.add_constraint(minus, Relation::Ge, base[i]);
    }
    for &(row, v) in fixed {
        let coeffs = (0..n).filter(|&j| s.get(row, j)).map(|j| (j, 1.0)).collect();
        p.add_constraint(coeffs, Relation::Eq, v);
    }
    let sol = solve_milp_with(&p, limits)?;
    if sol.status != SolveStatus::Optimal {
        return Err(Error::Solver {
            context: "REC-MILP".into(),
            status: format!("{:?}", sol.status),
        });
    }
    Ok((sol.values[..n].to_vec(), sol.node_count))
}

/// Convex node cost on `0..=len(increments)`: `f(x) = base + sum_{k<x} inc[k]`.
struct NodeCost {
    base: f64,
    increments: Vec<f64>,
    /// For internal nodes, the child slot that supplied each merged increment.
    origin: Vec<u32>,
}

#[derive(PartialEq)]
struct Head {
    value: f64,
    child: usize,
    pos: usize,
}

impl Eq for Head {}
impl PartialOrd for Head {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Head {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .value
            .total_cmp(&self.value)
            .then_with(|| other.child.cmp(&self.child))
    }
}

fn abs_increment(w: f64, target: f64, k: usize) -> f64 {
    let k = k as f64;
    w * ((k + 1.0 - target).abs() - (k - target).abs())
}

/// Exact L1 reconciliation on a tree: min-plus convolution of convex child
/// costs is a merge of their increment sequences.
fn tree_dp(s: &SummingMatrix, base: &[f64], w: &[f64], hi: &[i64]) -> Vec<f64> {
    let m = s.n_series();
    let parents = s.parent_rows();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(i);
        }
    }
    let mut bottom_col = vec![usize::MAX; m];
    for (j, &r) in s.bottom_rows().iter().enumerate() {
        bottom_col[r] = j;
    }
    // rows are level-major, so children always follow their parent
    let mut costs: Vec<Option<NodeCost>> = (0..m).map(|_| None).collect();
    for i in (0..m).rev() {
        let mut cost = if children[i].is_empty() {
            let h = hi[bottom_col[i]] as usize;
            NodeCost {
                base: 0.0,
                increments: vec![0.0; h],
                origin: Vec::new(),
            }
        } else {
            let kids: Vec<NodeCost> = children[i]
                .iter()
                .map(|&c| costs[c].take().expect("child solved"))
                .collect();
            let total: usize = kids.iter().map(|k| k.increments.len()).sum();
            let mut increments = Vec::with_capacity(total);
            let mut origin = Vec::with_capacity(total);
            let mut heap: BinaryHeap<Head> = kids
                .iter()
                .enumerate()
                .filter(|(_, k)| !k.increments.is_empty())
                .map(|(c, k)| Head {
                    value: k.increments[0],
                    child: c,
                    pos: 0,
                })
                .collect();
            while let Some(h) = heap.pop() {
                increments.push(h.value);
                origin.push(h.child as u32);
                if let Some(&v) = kids[h.child].increments.get(h.pos + 1) {
                    heap.push(Head {
                        value: v,
                        child: h.child,
                        pos: h.pos + 1,
                    });
                }
            }
            let base = kids.iter().map(|k| k.base).sum();
            // keep children for the backward pass
            for (slot, k) in children[i].iter().zip(kids) {
                costs[*slot] = Some(k);
            }
            NodeCost {
                base,
                increments,
                origin,
            }
        };
        cost.base += w[i] * base[i].abs();
        for (k, inc) in cost.increments.iter_mut().enumerate() {
            *inc += abs_increment(w[i], base[i], k);
        }
        costs[i] = Some(cost);
    }
    // root value: first minimizer of the prefix sums
    let root = (0..m).find(|&i| parents[i].is_none()).expect("hierarchy has a root");
    let mut value = vec![0usize; m];
    {
        let c = costs[root].as_ref().expect("root solved");
        let (mut acc, mut best, mut arg) = (0.0, 0.0, 0usize);
        for (k, inc) in c.increments.iter().enumerate() {
            acc += inc;
            if acc < best {
                best = acc;
                arg = k + 1;
            }
        }
        value[root] = arg;
    }
    for i in 0..m {
        if children[i].is_empty() {
            continue;
        }
        let c = costs[i].as_ref().expect("node solved");
        let mut counts = vec![0usize; children[i].len()];
        for &o in &c.origin[..value[i]] {
            counts[o as usize] += 1;
        }
        for (slot, &child) in children[i].iter().enumerate() {
            value[child] = counts[slot];
        }
    }
    s.bottom_rows().iter().map(|&r| value[r] as f64).collect()
}
