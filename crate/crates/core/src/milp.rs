//! Small exact MILP core: dense two-phase simplex and best-first
//! branch-and-bound.
//!
//! Tolerances: feasibility 1e-7, integrality 1e-6. Pivoting uses the most
//! negative reduced cost with lowest-index ties and falls back to Bland's
//! rule after a run of degenerate pivots.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEAS_TOL: f64 = 1e-7;
pub const INT_TOL: f64 = 1e-6;
const PIVOT_TOL: f64 = 1e-9;
const DEGENERATE_RUN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

impl Relation {
    fn flip(self) -> Self {
        match self {
            Relation::Le => Relation::Ge,
            Relation::Ge => Relation::Le,
            Relation::Eq => Relation::Eq,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Relation::Le => "<=",
            Relation::Eq => "=",
            Relation::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    /// Sparse `(variable, coefficient)` pairs.
    pub coeffs: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn activity(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, a)| a * x[j]).sum()
    }

    pub fn violation(&self, x: &[f64]) -> f64 {
        let lhs = self.activity(x);
        match self.relation {
            Relation::Le => (lhs - self.rhs).max(0.0),
            Relation::Ge => (self.rhs - lhs).max(0.0),
            Relation::Eq => (lhs - self.rhs).abs(),
        }
    }
}

/// Minimization problem with per-variable bounds and integrality flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilpProblem {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub integer: Vec<bool>,
}

impl MilpProblem {
    /// `n` continuous variables in `[0, inf)` with zero cost.
    pub fn new(n: usize) -> Self {
        Self {
            objective: vec![0.0; n],
            constraints: Vec::new(),
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
            integer: vec![false; n],
        }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add_constraint(&mut self, coeffs: Vec<(usize, f64)>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint {
            coeffs,
            relation,
            rhs,
        });
    }

    pub fn set_bounds(&mut self, j: usize, lo: f64, hi: f64) {
        self.lower[j] = lo;
        self.upper[j] = hi;
    }

    pub fn set_integer(&mut self, j: usize, lo: f64, hi: f64) {
        self.set_bounds(j, lo, hi);
        self.integer[j] = true;
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let rows = self.constraints.iter().map(|c| c.violation(x));
        let bounds = (0..self.n_vars()).map(|j| {
            (self.lower[j] - x[j]).max(0.0).max(x[j] - self.upper[j])
        });
        rows.chain(bounds).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        Error::check_len(n, self.lower.len())?;
        Error::check_len(n, self.upper.len())?;
        Error::check_len(n, self.integer.len())?;
        for j in 0..n {
            if self.lower[j] > self.upper[j] || self.lower[j].is_nan() || self.upper[j].is_nan() {
                return Err(Error::invalid(format!("variable {j} has empty bounds")));
            }
            if self.integer[j] && !(self.lower[j].is_finite() && self.upper[j].is_finite()) {
                return Err(Error::invalid(format!("integer variable {j} is not boxed")));
            }
            if !self.objective[j].is_finite() {
                return Err(Error::invalid(format!("objective coefficient {j} not finite")));
            }
        }
        for (r, c) in self.constraints.iter().enumerate() {
            if !c.rhs.is_finite() || c.coeffs.iter().any(|&(j, a)| j >= n || !a.is_finite()) {
                return Err(Error::invalid(format!("constraint {r} malformed")));
            }
        }
        Ok(())
    }

    /// CPLEX LP-format text for cross-checking with external solvers.
    pub fn to_lp_format(&self) -> String {
        fn terms(coeffs: impl Iterator<Item = (usize, f64)>) -> String {
            let mut s = String::new();
            for (j, a) in coeffs {
                let sign = if a < 0.0 { "-" } else { "+" };
                let _ = write!(s, " {sign} {} x{j}", a.abs());
            }
            if s.is_empty() {
                s.push_str(" 0 x0");
            }
            s
        }
        let mut out = String::from("Minimize\n obj:");
        out += &terms(self.objective.iter().copied().enumerate().filter(|(_, c)| *c != 0.0));
        out += "\nSubject To\n";
        for (r, c) in self.constraints.iter().enumerate() {
            let _ = writeln!(
                out,
                " c{r}:{} {} {}",
                terms(c.coeffs.iter().copied()),
                c.relation.symbol(),
                c.rhs
            );
        }
        out += "Bounds\n";
        for j in 0..self.n_vars() {
            let (lo, hi) = (self.lower[j], self.upper[j]);
            let _ = match (lo.is_finite(), hi.is_finite()) {
                (false, false) => writeln!(out, " x{j} free"),
                (true, true) => writeln!(out, " {lo} <= x{j} <= {hi}"),
                (true, false) => writeln!(out, " x{j} >= {lo}"),
                (false, true) => writeln!(out, " -inf <= x{j} <= {hi}"),
            };
        }
        let ints: Vec<String> = (0..self.n_vars())
            .filter(|&j| self.integer[j])
            .map(|j| format!("x{j}"))
            .collect();
        if !ints.is_empty() {
            out += "General\n ";
            out += &ints.join(" ");
            out += "\n";
        }
        out += "End\n";
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilpSolution {
    pub status: SolveStatus,
    pub values: Vec<f64>,
    pub objective_value: f64,
    pub node_count: usize,
    /// Dual objective of the final LP (root LP for `solve_lp`).
    pub dual_bound: Option<f64>,
}

impl MilpSolution {
    fn failed(status: SolveStatus, nodes: usize) -> Self {
        Self {
            status,
            values: Vec::new(),
            objective_value: f64::NAN,
            node_count: nodes,
            dual_bound: None,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverLimits {
    pub max_pivots: usize,
    pub max_nodes: usize,
}

impl Default for SolverLimits {
    fn default() -> Self {
        Self {
            max_pivots: 100_000,
            max_nodes: 200_000,
        }
    }
}

/// How a tableau column maps back to an original variable.
#[derive(Debug, Clone, Copy)]
struct ColMap {
    var: usize,
    sign: f64,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    n_struct: usize,
    /// Column that formed row i's initial identity (slack or artificial).
    identity_col: Vec<usize>,
    /// Extra sign for the dual of row i (rows negated to make rhs >= 0).
    row_sign: Vec<f64>,
    n_cols: usize,
}

enum LpOutcome {
    Optimal,
    Unbounded,
    Limit,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.rows[i][self.n_cols]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb != 0.0 {
                for (dj, a) in d.iter_mut().zip(&self.rows[i][..self.n_cols]) {
                    *dj -= cb * a;
                }
            }
        }
        d
    }

    /// Minimizes `cost` over the current basis; `allowed` filters entering columns.
    fn optimize(&mut self, cost: &[f64], allowed: &dyn Fn(usize) -> bool, budget: &mut usize) -> LpOutcome {
        let mut degenerate = 0usize;
        loop {
            let d = self.reduced_costs(cost);
            let bland = degenerate >= DEGENERATE_RUN;
            let mut enter = None;
            let mut best = -PIVOT_TOL;
            for j in 0..self.n_cols {
                if !allowed(j) || d[j] >= -PIVOT_TOL {
                    continue;
                }
                if bland {
                    enter = Some(j);
                    break;
                }
                if d[j] < best {
                    best = d[j];
                    enter = Some(j);
                }
            }
            let Some(c) = enter else {
                return LpOutcome::Optimal;
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][c];
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-12
                                || (ratio <= lr + 1e-12 && self.basis[i] < self.basis[li])
                            {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            let Some((r, ratio)) = leave else {
                return LpOutcome::Unbounded;
            };
            if *budget == 0 {
                return LpOutcome::Limit;
            }
            *budget -= 1;
            degenerate = if ratio.abs() <= 1e-12 { degenerate + 1 } else { 0 };
            self.pivot(r, c);
        }
    }
}

struct LpResult {
    status: SolveStatus,
    values: Vec<f64>,
    objective: f64,
    dual: Option<f64>,
}

fn solve_lp_bounded(p: &MilpProblem, lower: &[f64], upper: &[f64], budget: &mut usize) -> LpResult {
    let n = p.n_vars();
    let fail = |status| LpResult {
        status,
        values: Vec::new(),
        objective: f64::NAN,
        dual: None,
    };
    // substitute x = offset + sign * x'
    let mut offset = vec![0.0; n];
    let mut cols: Vec<ColMap> = Vec::new();
    let mut var_cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut rows: Vec<(Vec<(usize, f64)>, Relation, f64)> = Vec::new();
    for j in 0..n {
        let (lo, hi) = (lower[j], upper[j]);
        if lo.is_finite() {
            offset[j] = lo;
            var_cols[j].push((cols.len(), 1.0));
            cols.push(ColMap { var: j, sign: 1.0 });
            if hi.is_finite() {
                rows.push((vec![(cols.len() - 1, 1.0)], Relation::Le, hi - lo));
            }
        } else if hi.is_finite() {
            offset[j] = hi;
            var_cols[j].push((cols.len(), -1.0));
            cols.push(ColMap { var: j, sign: -1.0 });
        } else {
            var_cols[j].push((cols.len(), 1.0));
            cols.push(ColMap { var: j, sign: 1.0 });
            var_cols[j].push((cols.len(), -1.0));
            cols.push(ColMap { var: j, sign: -1.0 });
        }
    }
    let n_bound_rows = rows.len();
    for c in &p.constraints {
        let mut coeffs = Vec::new();
        let mut rhs = c.rhs;
        for &(j, a) in &c.coeffs {
            rhs -= a * offset[j];
            for &(col, s) in &var_cols[j] {
                coeffs.push((col, a * s));
            }
        }
        rows.push((coeffs, c.relation, rhs));
    }
    let n_struct = cols.len();
    let m = rows.len();
    let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
    let n_art = rows
        .iter()
        .filter(|(_, rel, rhs)| {
            let rel = if *rhs < 0.0 { rel.flip() } else { *rel };
            rel != Relation::Le
        })
        .count();
    let n_cols = n_struct + n_slack + n_art;
    let first_artificial = n_struct + n_slack;
    let mut t = Tableau {
        rows: vec![vec![0.0; n_cols + 1]; m],
        basis: vec![0; m],
        n_struct,
        identity_col: vec![0; m],
        row_sign: vec![1.0; m],
        n_cols,
    };
    let (mut next_slack, mut next_art) = (n_struct, first_artificial);
    for (i, (coeffs, rel, rhs)) in rows.iter().enumerate() {
        let sgn = if *rhs < 0.0 { -1.0 } else { 1.0 };
        let rel = if sgn < 0.0 { rel.flip() } else { *rel };
        t.row_sign[i] = sgn;
        for &(col, a) in coeffs {
            t.rows[i][col] += sgn * a;
        }
        t.rows[i][n_cols] = sgn * rhs;
        match rel {
            Relation::Le => {
                t.rows[i][next_slack] = 1.0;
                t.basis[i] = next_slack;
                t.identity_col[i] = next_slack;
                next_slack += 1;
            }
            Relation::Ge => {
                t.rows[i][next_slack] = -1.0;
                next_slack += 1;
                t.rows[i][next_art] = 1.0;
                t.basis[i] = next_art;
                t.identity_col[i] = next_art;
                next_art += 1;
            }
            Relation::Eq => {
                t.rows[i][next_art] = 1.0;
                t.basis[i] = next_art;
                t.identity_col[i] = next_art;
                next_art += 1;
            }
        }
    }

    if n_art > 0 {
        let mut phase1 = vec![0.0; n_cols];
        for c in phase1.iter_mut().skip(first_artificial) {
            *c = 1.0;
        }
        match t.optimize(&phase1, &|_| true, budget) {
            LpOutcome::Limit => return fail(SolveStatus::IterationLimit),
            LpOutcome::Unbounded => return fail(SolveStatus::Infeasible),
            LpOutcome::Optimal => {}
        }
        let scale = 1.0 + rows.iter().map(|r| r.2.abs()).fold(0.0, f64::max);
        let infeas: f64 = (0..m)
            .filter(|&i| t.basis[i] >= first_artificial)
            .map(|i| t.rhs(i))
            .sum();
        if infeas > FEAS_TOL * scale {
            return fail(SolveStatus::Infeasible);
        }
        // drive zero-level artificials out where possible
        for i in 0..m {
            if t.basis[i] >= first_artificial {
                if let Some(c) = (0..first_artificial).find(|&c| t.rows[i][c].abs() > 1e-7) {
                    t.pivot(i, c);
                }
            }
        }
    }

    let mut cost = vec![0.0; n_cols];
    for (c, map) in cols.iter().enumerate() {
        cost[c] = map.sign * p.objective[map.var];
    }
    match t.optimize(&cost, &|c| c < first_artificial, budget) {
        LpOutcome::Limit => return fail(SolveStatus::IterationLimit),
        LpOutcome::Unbounded => return fail(SolveStatus::Unbounded),
        LpOutcome::Optimal => {}
    }

    let mut xs = vec![0.0; n_cols];
    for (i, &b) in t.basis.iter().enumerate() {
        xs[b] = t.rhs(i);
    }
    let mut values = offset.clone();
    for (c, map) in cols.iter().enumerate().take(t.n_struct) {
        values[map.var] += map.sign * xs[c];
    }
    let objective = p.objective_value(&values);

    // duals y_i = c_B B^-1 e_i read from the identity columns
    let d = t.reduced_costs(&cost);
    let const_term: f64 = p.objective.iter().zip(&offset).map(|(c, o)| c * o).sum();
    let mut dual = const_term;
    for i in 0..m {
        let y = cost[t.identity_col[i]] - d[t.identity_col[i]];
        dual += y * t.row_sign[i] * rows[i].2;
    }
    let _ = n_bound_rows;
    LpResult {
        status: SolveStatus::Optimal,
        values,
        objective,
        dual: Some(dual),
    }
}

/// LP relaxation (integrality ignored).
pub fn solve_lp(p: &MilpProblem) -> Result<MilpSolution> {
    solve_lp_with(p, SolverLimits::default())
}

pub fn solve_lp_with(p: &MilpProblem, limits: SolverLimits) -> Result<MilpSolution> {
    p.validate()?;
    let mut budget = limits.max_pivots;
    let r = solve_lp_bounded(p, &p.lower, &p.upper, &mut budget);
    Ok(MilpSolution {
        status: r.status,
        values: r.values,
        objective_value: r.objective,
        node_count: 1,
        dual_bound: r.dual,
    })
}

#[derive(Debug)]
struct Node {
    bound: f64,
    id: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // max-heap: smaller bound first, then older node
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.id.cmp(&self.id))
    }
}

pub fn solve_milp(p: &MilpProblem) -> Result<MilpSolution> {
    solve_milp_with(p, SolverLimits::default())
}

/// Best-first branch-and-bound on the most fractional variable.
pub fn solve_milp_with(p: &MilpProblem, limits: SolverLimits) -> Result<MilpSolution> {
    p.validate()?;
    let mut budget = limits.max_pivots;
    let mut lower = p.lower.clone();
    let mut upper = p.upper.clone();
    for j in 0..p.n_vars() {
        if p.integer[j] {
            lower[j] = (lower[j] - INT_TOL).ceil();
            upper[j] = (upper[j] + INT_TOL).floor();
            if lower[j] > upper[j] {
                return Ok(MilpSolution::failed(SolveStatus::Infeasible, 0));
            }
        }
    }
    let mut heap = BinaryHeap::new();
    let mut nodes = 0usize;
    let mut next_id = 0usize;
    let mut incumbent: Option<(f64, Vec<f64>)> = None;
    let mut root_dual = None;
    heap.push(Node {
        bound: f64::NEG_INFINITY,
        id: next_id,
        lower,
        upper,
    });
    next_id += 1;
    while let Some(node) = heap.pop() {
        if let Some((best, _)) = &incumbent {
            if node.bound >= best - 1e-9 {
                continue;
            }
        }
        if nodes >= limits.max_nodes {
            return Ok(MilpSolution::failed(SolveStatus::IterationLimit, nodes));
        }
        nodes += 1;
        let lp = solve_lp_bounded(p, &node.lower, &node.upper, &mut budget);
        match lp.status {
            SolveStatus::Optimal => {}
            SolveStatus::Infeasible => continue,
            SolveStatus::Unbounded if nodes == 1 => {
                return Ok(MilpSolution::failed(SolveStatus::Unbounded, nodes))
            }
            SolveStatus::Unbounded => continue,
            SolveStatus::IterationLimit => {
                return Ok(MilpSolution::failed(SolveStatus::IterationLimit, nodes))
            }
        }
        if nodes == 1 {
            root_dual = lp.dual;
        }
        if let Some((best, _)) = &incumbent {
            if lp.objective >= best - 1e-9 {
                continue;
            }
        }
        let mut branch: Option<(usize, f64)> = None;
        for j in 0..p.n_vars() {
            if !p.integer[j] {
                continue;
            }
            let v = lp.values[j];
            let frac = v - v.floor();
            if frac > INT_TOL && frac < 1.0 - INT_TOL {
                let dist = (frac - 0.5).abs();
                if branch.is_none_or(|(_, d)| dist < d - 1e-12) {
                    branch = Some((j, dist));
                }
            }
        }
        match branch {
            None => {
                let mut values = lp.values;
                for j in 0..p.n_vars() {
                    if p.integer[j] {
                        values[j] = values[j].round();
                    }
                }
                let obj = p.objective_value(&values);
                if p.max_violation(&values) <= FEAS_TOL * 10.0
                    && incumbent.as_ref().is_none_or(|(b, _)| obj < *b)
                {
                    incumbent = Some((obj, values));
                }
            }
            Some((j, _)) => {
                let v = lp.values[j];
                let mut down_hi = node.upper.clone();
                down_hi[j] = v.floor();
                let mut up_lo = node.lower.clone();
                up_lo[j] = v.ceil();
                heap.push(Node {
                    bound: lp.objective,
                    id: next_id,
                    lower: node.lower.clone(),
                    upper: down_hi,
                });
                heap.push(Node {
                    bound: lp.objective,
                    id: next_id + 1,
                    lower: up_lo,
                    upper: node.upper,
                });
                next_id += 2;
            }
        }
    }
    Ok(match incumbent {
        Some((obj, values)) => MilpSolution {
            status: SolveStatus::Optimal,
            values,
            objective_value: obj,
            node_count: nodes,
            dual_bound: root_dual,
        },
        None => MilpSolution::failed(SolveStatus::Infeasible, nodes),
    })
}
