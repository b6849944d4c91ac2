//! Candidate pools, pool costs and exact POOL-SEL-BP.
//!
//! Losses are relative to each series' own (singleton) model, so singleton
//! entries are 0. Singleton candidates only serve their own series, which
//! lets the solver enumerate open-sets over shared pools alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::milp::{solve_milp, MilpProblem, Relation, SolveStatus};

/// Shared pools beyond this count go to the MILP instead of enumeration.
pub const ENUMERATION_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolCandidate {
    pub id: String,
    /// Member series ids, sorted.
    pub members: Vec<String>,
    pub model_count: usize,
    pub gini: f64,
    pub cost: f64,
}

impl PoolCandidate {
    pub fn is_singleton(&self) -> bool {
        self.members.len() == 1
    }

    pub fn contains(&self, series: &str) -> bool {
        self.members.binary_search_by(|m| m.as_str().cmp(series)).is_ok()
    }
}

/// Standard mean-absolute-difference Gini of a share vector.
pub fn gini_imbalance(shares: &[f64]) -> Result<f64> {
    if shares.is_empty() {
        return Err(Error::EmptyInput("gini of no shares".into()));
    }
    if shares.iter().any(|s| *s < 0.0 || !s.is_finite()) {
        return Err(Error::invalid("shares must be finite and nonnegative"));
    }
    let n = shares.len() as f64;
    let total: f64 = shares.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("shares must have positive sum"));
    }
    let mut sorted = shares.to_vec();
    sorted.sort_by(f64::total_cmp);
    // sum_{i,j} |x_i - x_j| = 2 * sum_k (2k - n + 1) x_(k)
    let mad: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, x)| (2.0 * k as f64 - n + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    Ok(mad / (2.0 * n * total))
}

/// `kappa = s * M * (1 + nu * G)`.
pub fn pool_cost(model_count: usize, gini: f64, s: f64, nu: f64) -> f64 {
    s * model_count as f64 * (1.0 + nu * gini)
}

/// Validation losses `L[i][g]` (absent when i is not in g) and per-series
/// no-pooling baselines `L_i0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolLossTable {
    pub series_ids: Vec<String>,
    pub baseline: Vec<f64>,
    pub losses: Vec<Vec<Option<f64>>>,
}

impl PoolLossTable {
    /// `Delta L_ig = L_ig - L_i0`.
    pub fn relative(&self) -> Vec<Vec<Option<f64>>> {
        self.losses
            .iter()
            .zip(&self.baseline)
            .map(|(row, b)| row.iter().map(|l| l.map(|l| l - b)).collect())
            .collect()
    }

    fn validate(&self, candidates: &[PoolCandidate]) -> Result<()> {
        Error::check_len(self.series_ids.len(), self.baseline.len())?;
        Error::check_len(self.series_ids.len(), self.losses.len())?;
        for (i, row) in self.losses.iter().enumerate() {
            Error::check_len(candidates.len(), row.len())?;
            if row.iter().all(Option::is_none) {
                return Err(Error::data(format!(
                    "series {} is not covered by any candidate",
                    self.series_ids[i]
                )));
            }
            if row.iter().flatten().any(|l| !l.is_finite()) {
                return Err(Error::data(format!("non-finite loss for {}", self.series_ids[i])));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSelection {
    /// Candidate index per series.
    pub assignment: Vec<usize>,
    pub open: Vec<bool>,
    pub objective: f64,
}

impl PoolSelection {
    pub fn open_ids<'a>(&self, candidates: &'a [PoolCandidate]) -> Vec<&'a str> {
        candidates
            .iter()
            .zip(&self.open)
            .filter(|(_, o)| **o)
            .map(|(c, _)| c.id.as_str())
            .collect()
    }

    pub fn mean_loss(&self, table: &[Vec<Option<f64>>]) -> f64 {
        let total: f64 = self
            .assignment
            .iter()
            .enumerate()
            .map(|(i, &g)| table[i][g].unwrap_or(0.0))
            .sum();
        total / self.assignment.len().max(1) as f64
    }
}

/// Objective `sum_i L_i,g(i) + lambda * sum_open kappa_g` of an open set,
/// with each series on its cheapest open pool. `None` if some series has
/// no open pool.
pub fn open_set_objective(
    losses: &[Vec<Option<f64>>],
    candidates: &[PoolCandidate],
    open: &[bool],
    lambda: f64,
) -> Option<f64> {
    let mut total: f64 = candidates
        .iter()
        .zip(open)
        .filter(|(_, o)| **o)
        .map(|(c, _)| lambda * c.cost)
        .sum();
    for row in losses {
        let best = row
            .iter()
            .zip(open)
            .filter(|(_, o)| **o)
            .filter_map(|(l, _)| *l)
            .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.min(l))));
        total += best?;
    }
    Some(total)
}

/// Cheapest open pool per series; ties prefer larger pools, then lower id.
fn assign(losses: &[Vec<Option<f64>>], candidates: &[PoolCandidate], open: &[bool]) -> Vec<usize> {
    losses
        .iter()
        .map(|row| {
            let mut best: Option<usize> = None;
            for (g, l) in row.iter().enumerate() {
                let (Some(l), true) = (l, open[g]) else { continue };
                best = match best {
                    None => Some(g),
                    Some(b) => {
                        let lb = row[b].expect("assigned entries exist");
                        let better = *l < lb
                            || (*l == lb
                                && (candidates[g].members.len(), &candidates[b].id)
                                    > (candidates[b].members.len(), &candidates[g].id));
                        Some(if better { g } else { b })
                    }
                };
            }
            best.expect("every series has an open pool")
        })
        .collect()
}

fn finish(losses: &[Vec<Option<f64>>], candidates: &[PoolCandidate], open: &[bool], lambda: f64) -> PoolSelection {
    let assignment = assign(losses, candidates, open);
    let mut used = vec![false; candidates.len()];
    for &g in &assignment {
        used[g] = true;
    }
    let objective = open_set_objective(losses, candidates, &used, lambda).expect("assignment is feasible");
    PoolSelection {
        assignment,
        open: used,
        objective,
    }
}

/// Globally optimal POOL-SEL-BP in relative-loss form.
pub fn solve_pool_selection(
    table: &PoolLossTable,
    candidates: &[PoolCandidate],
    lambda: f64,
) -> Result<PoolSelection> {
    table.validate(candidates)?;
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::invalid(format!("lambda {lambda} must be nonnegative")));
    }
    let losses = table.relative();
    let shared: Vec<usize> = (0..candidates.len())
        .filter(|&g| !candidates[g].is_singleton())
        .collect();
    if shared.len() > ENUMERATION_LIMIT {
        return solve_by_milp(&losses, candidates, lambda);
    }
    // singletons decided per series, so only shared pools are enumerated
    let slot: BTreeMap<usize, usize> = shared.iter().enumerate().map(|(k, &g)| (g, k)).collect();
    let compact: Vec<(f64, Vec<(usize, f64)>)> = losses
        .iter()
        .map(|row| {
            let mut single = f64::INFINITY;
            let mut pools = Vec::new();
            for (g, l) in row.iter().enumerate() {
                let Some(l) = l else { continue };
                if candidates[g].is_singleton() {
                    single = single.min(l + lambda * candidates[g].cost);
                } else {
                    pools.push((slot[&g], *l));
                }
            }
            (single, pools)
        })
        .collect();
    let mut best: Option<(f64, u64)> = None;
    // descending, so ties between open-sets favour more pooling
    for mask in (0u64..(1u64 << shared.len())).rev() {
        let mut total: f64 = shared
            .iter()
            .enumerate()
            .filter(|(k, _)| mask >> k & 1 == 1)
            .map(|(_, &g)| lambda * candidates[g].cost)
            .sum();
        let mut feasible = true;
        for (single, pools) in &compact {
            let mut v = *single;
            for &(k, l) in pools {
                if mask >> k & 1 == 1 && l < v {
                    v = l;
                }
            }
            if v == f64::INFINITY {
                feasible = false;
                break;
            }
            total += v;
        }
        if feasible && best.is_none_or(|(b, _)| total < b) {
            best = Some((total, mask));
        }
    }
    let best = best.map(|(_, mask)| {
        let mut open = vec![false; candidates.len()];
        for (k, &g) in shared.iter().enumerate() {
            open[g] = mask >> k & 1 == 1;
        }
        open
    });
    let mut open = best.ok_or_else(|| Error::data("no feasible pool assignment"))?;
    // open exactly the singletons that beat every open shared pool
    for row in &losses {
        let shared_best = row
            .iter()
            .enumerate()
            .filter(|(g, l)| open[*g] && l.is_some() && !candidates[*g].is_singleton())
            .map(|(_, l)| l.unwrap())
            .fold(f64::INFINITY, f64::min);
        let single = row
            .iter()
            .enumerate()
            .filter(|(g, l)| candidates[*g].is_singleton() && l.is_some())
            .map(|(g, l)| (g, l.unwrap() + lambda * candidates[g].cost))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((g, v)) = single {
            if v < shared_best {
                open[g] = true;
            }
        }
    }
    Ok(finish(&losses, candidates, &open, lambda))
}

fn solve_by_milp(losses: &[Vec<Option<f64>>], candidates: &[PoolCandidate], lambda: f64) -> Result<PoolSelection> {
    let n_pools = candidates.len();
    let mut pairs = Vec::new();
    for (i, row) in losses.iter().enumerate() {
        for (g, l) in row.iter().enumerate() {
            if let Some(l) = l {
                pairs.push((i, g, *l));
            }
        }
    }
    // variables: y_g, then x_ig per pair
    let mut p = MilpProblem::new(n_pools + pairs.len());
    for (g, c) in candidates.iter().enumerate() {
        p.set_integer(g, 0.0, 1.0);
        p.objective[g] = lambda * c.cost;
    }
    let mut by_series: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for (k, &(i, g, l)) in pairs.iter().enumerate() {
        let x = n_pools + k;
        p.set_bounds(x, 0.0, 1.0);
        p.objective[x] = l;
        p.add_constraint(vec![(x, 1.0), (g, -1.0)], Relation::Le, 0.0);
        by_series.entry(i).or_default().push((x, 1.0));
    }
    for (_, coeffs) in by_series {
        p.add_constraint(coeffs, Relation::Eq, 1.0);
    }
    let sol = solve_milp(&p)?;
    if sol.status != SolveStatus::Optimal {
        return Err(Error::Solver {
            context: "POOL-SEL-BP".into(),
            status: format!("{:?}", sol.status),
        });
    }
    let open: Vec<bool> = sol.values[..n_pools].iter().map(|v| *v > 0.5).collect();
    Ok(finish(losses, candidates, &open, lambda))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub lambda: f64,
    pub mean_relative_loss: f64,
    pub pools_opened: usize,
    /// `sum of kappa_g` over open pools; non-increasing in lambda.
    pub open_cost: f64,
    pub open_ids: Vec<String>,
    pub objective: f64,
}

pub fn lambda_frontier(
    table: &PoolLossTable,
    candidates: &[PoolCandidate],
    lambdas: &[f64],
) -> Result<Vec<FrontierPoint>> {
    if lambdas.is_empty() {
        return Err(Error::EmptyInput("lambda grid".into()));
    }
    let rel = table.relative();
    lambdas
        .iter()
        .map(|&lambda| {
            let sel = solve_pool_selection(table, candidates, lambda)?;
            Ok(FrontierPoint {
                lambda,
                mean_relative_loss: sel.mean_loss(&rel),
                pools_opened: sel.open.iter().filter(|o| **o).count(),
                open_cost: candidates
                    .iter()
                    .zip(&sel.open)
                    .filter(|(_, o)| **o)
                    .map(|(c, _)| c.cost)
                    .sum(),
                open_ids: sel.open_ids(candidates).into_iter().map(String::from).collect(),
                objective: sel.objective,
            })
        })
        .collect()
}

/// Index of the largest second difference of loss along the frontier
/// (first index on ties); endpoints when fewer than three points.
pub fn elbow_index(frontier: &[FrontierPoint]) -> usize {
    if frontier.len() < 3 {
        return 0;
    }
    let mut best = (1, f64::NEG_INFINITY);
    for k in 1..frontier.len() - 1 {
        let d2 = frontier[k - 1].mean_relative_loss - 2.0 * frontier[k].mean_relative_loss
            + frontier[k + 1].mean_relative_loss;
        if d2.abs() > best.1 {
            best = (k, d2.abs());
        }
    }
    best.0
}

/// `s` such that the mean pool cost equals the mean |Delta L| over shared
/// candidate entries.
pub fn calibrate_scale(table: &PoolLossTable, candidates: &[PoolCandidate], nu: f64) -> Result<f64> {
    let rel = table.relative();
    let mut abs_sum = 0.0;
    let mut count = 0usize;
    for row in &rel {
        for (g, l) in row.iter().enumerate() {
            if let (Some(l), false) = (l, candidates[g].is_singleton()) {
                abs_sum += l.abs();
                count += 1;
            }
        }
    }
    let shared: Vec<&PoolCandidate> = candidates.iter().filter(|c| !c.is_singleton()).collect();
    if count == 0 || shared.is_empty() {
        return Err(Error::EmptyInput("no shared candidate losses to calibrate on".into()));
    }
    let unit: f64 = shared
        .iter()
        .map(|c| pool_cost(c.model_count, c.gini, 1.0, nu))
        .sum::<f64>()
        / shared.len() as f64;
    Ok((abs_sum / count as f64) / unit)
}

/// A grouping of series into candidate pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolFamily {
    pub name: String,
    /// Key columns whose values define a pool; empty means one pool per level.
    pub group_by: Vec<String>,
}

/// Series metadata needed to form pools.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMeta {
    pub id: String,
    pub level: usize,
    /// Key values by column, for the columns present at this level.
    pub keys: BTreeMap<String, String>,
    /// Training observations, for sample shares.
    pub n_obs: usize,
}

/// Pools for every family (series grouped within their hierarchy level)
/// plus all singletons. Pools that duplicate a singleton or an earlier
/// pool are dropped. `model_count` is the number of pools the family opens.
pub fn build_candidates(
    series: &[SeriesMeta],
    families: &[PoolFamily],
    s: f64,
    nu: f64,
) -> Result<Vec<PoolCandidate>> {
    let mut out: Vec<PoolCandidate> = Vec::new();
    let obs: BTreeMap<&str, usize> = series.iter().map(|m| (m.id.as_str(), m.n_obs)).collect();
    for fam in families {
        let mut groups: BTreeMap<(usize, Vec<String>), Vec<String>> = BTreeMap::new();
        for m in series {
            let key: Vec<String> = fam
                .group_by
                .iter()
                .map(|c| m.keys.get(c).cloned().unwrap_or_else(|| "*".into()))
                .collect();
            groups.entry((m.level, key)).or_default().push(m.id.clone());
        }
        let pools: Vec<(String, Vec<String>)> = groups
            .into_iter()
            .filter(|(_, members)| members.len() > 1)
            .map(|((level, key), mut members)| {
                members.sort();
                let label = if key.is_empty() { "all".to_string() } else { key.join("+") };
                (format!("{}:L{level}:{label}", fam.name), members)
            })
            .collect();
        let m_count = pools.len();
        for (id, members) in pools {
            if out.iter().any(|c| c.members == members) {
                continue;
            }
            let shares: Vec<f64> = members.iter().map(|id| obs[id.as_str()] as f64).collect();
            let gini = if shares.iter().sum::<f64>() > 0.0 { gini_imbalance(&shares)? } else { 0.0 };
            out.push(PoolCandidate {
                id,
                cost: pool_cost(m_count, gini, s, nu),
                members,
                model_count: m_count,
                gini,
            });
        }
    }
    for m in series {
        out.push(PoolCandidate {
            id: format!("single:{}", m.id),
            members: vec![m.id.clone()],
            model_count: 1,
            gini: 0.0,
            cost: pool_cost(1, 0.0, s, nu),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(id: &str, members: &[&str], cost: f64) -> PoolCandidate {
        let mut members: Vec<String> = members.iter().map(|s| s.to_string()).collect();
        members.sort();
        PoolCandidate {
            id: id.into(),
            members,
            model_count: 1,
            gini: 0.0,
            cost,
        }
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini_imbalance(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(gini_imbalance(&[1.0, 0.0]).unwrap(), 0.5);
        // Lorenz oracle: G = 1 - sum (L_{k-1} + L_k) / n
        let x = [1.0, 1.0, 1.0, 9.0];
        let total: f64 = x.iter().sum();
        let mut lorenz = vec![0.0];
        for v in x {
            lorenz.push(lorenz.last().unwrap() + v / total);
        }
        let area: f64 = lorenz.windows(2).map(|w| (w[0] + w[1]) / x.len() as f64).sum();
        assert!((gini_imbalance(&x).unwrap() - (1.0 - area)).abs() < 1e-12);
        assert!(gini_imbalance(&[]).is_err());
        assert!(gini_imbalance(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn cost_examples() {
        assert!((pool_cost(23, 0.1267, 0.0002, 1.0) - 0.005183).abs() < 1e-6);
        assert_eq!(pool_cost(4, 0.9, 0.5, 0.0), 2.0);
        assert_eq!(pool_cost(1, 0.0, 0.3, 2.0), 0.3);
    }

    fn toy() -> (PoolLossTable, Vec<PoolCandidate>) {
        let candidates = vec![
            cand("ab", &["a", "b"], 1.0),
            cand("abc", &["a", "b", "c"], 2.0),
            cand("single:a", &["a"], 0.0),
            cand("single:b", &["b"], 0.0),
            cand("single:c", &["c"], 0.0),
        ];
        let table = PoolLossTable {
            series_ids: vec!["a".into(), "b".into(), "c".into()],
            baseline: vec![1.0, 1.0, 1.0],
            losses: vec![
                vec![Some(0.5), Some(0.7), Some(1.0), None, None],
                vec![Some(0.8), Some(0.6), None, Some(1.0), None],
                vec![None, Some(0.9), None, None, Some(1.0)],
            ],
        };
        (table, candidates)
    }

    #[test]
    fn lambda_zero_is_per_series_argmin() {
        let (table, candidates) = toy();
        let sel = solve_pool_selection(&table, &candidates, 0.0).unwrap();
        assert_eq!(sel.assignment, vec![0, 1, 1]);
        assert_eq!(sel.open, vec![true, true, false, false, false]);
    }

    #[test]
    fn large_lambda_goes_local() {
        let (table, candidates) = toy();
        let sel = solve_pool_selection(&table, &candidates, 1e6).unwrap();
        assert_eq!(sel.assignment, vec![2, 3, 4]);
        assert_eq!(sel.objective, 0.0);
    }

    #[test]
    fn uncovered_series_is_an_error() {
        let (mut table, candidates) = toy();
        table.losses[2] = vec![None; 5];
        assert!(solve_pool_selection(&table, &candidates, 0.0).is_err());
    }

    #[test]
    fn ties_prefer_larger_pool() {
        let candidates = vec![cand("ab", &["a", "b"], 0.0), cand("single:a", &["a"], 0.0), cand("single:b", &["b"], 0.0)];
        let table = PoolLossTable {
            series_ids: vec!["a".into(), "b".into()],
            baseline: vec![1.0, 1.0],
            losses: vec![vec![Some(1.0), Some(1.0), None], vec![Some(1.0), None, Some(1.0)]],
        };
        let sel = solve_pool_selection(&table, &candidates, 0.0).unwrap();
        assert_eq!(sel.assignment, vec![0, 0]);
    }

    #[test]
    fn frontier_and_elbow() {
        let (table, candidates) = toy();
        let single = lambda_frontier(&table, &candidates, &[0.1]).unwrap();
        assert_eq!(single.len(), 1);
        let ends = lambda_frontier(&table, &candidates, &[0.0, f64::MAX]).unwrap();
        assert_eq!(ends[0].open_ids, vec!["ab", "abc"]);
        assert_eq!(ends[1].mean_relative_loss, 0.0);
        assert!(lambda_frontier(&table, &candidates, &[]).is_err());

        let pts: Vec<FrontierPoint> = [0.0, 0.1, 0.2, 1.0, 1.1]
            .iter()
            .enumerate()
            .map(|(k, &l)| FrontierPoint {
                lambda: k as f64,
                mean_relative_loss: l,
                pools_opened: 0,
                open_cost: 0.0,
                open_ids: vec![],
                objective: 0.0,
            })
            .collect();
        // second differences: 0, 0.7, -0.7 -> first max at index 2
        assert_eq!(elbow_index(&pts), 2);
    }

    #[test]
    fn calibration_matches_definition() {
        let (table, candidates) = toy();
        let s = calibrate_scale(&table, &candidates, 1.0).unwrap();
        // shared entries: -0.5, -0.3, -0.2, -0.4, -0.1 -> mean 0.3; both M=1, G=0
        assert!((s - 0.3).abs() < 1e-12);
    }

    #[test]
    fn candidates_from_metadata() {
        let meta = |id: &str, level: usize, keys: &[(&str, &str)], n: usize| SeriesMeta {
            id: id.into(),
            level,
            keys: keys.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            n_obs: n,
        };
        let series = vec![
            meta("total", 0, &[], 10),
            meta("m1", 1, &[("market", "m1")], 10),
            meta("m2", 1, &[("market", "m2")], 10),
            meta("m1/x", 2, &[("market", "m1"), ("type", "x")], 10),
            meta("m1/y", 2, &[("market", "m1"), ("type", "y")], 30),
            meta("m2/x", 2, &[("market", "m2"), ("type", "x")], 10),
        ];
        let fams = vec![
            PoolFamily { name: "global".into(), group_by: vec![] },
            PoolFamily { name: "market".into(), group_by: vec!["market".into()] },
            PoolFamily { name: "type".into(), group_by: vec!["type".into()] },
        ];
        let c = build_candidates(&series, &fams, 0.1, 1.0).unwrap();
        let ids: Vec<&str> = c.iter().map(|c| c.id.as_str()).collect();
        assert!(ids.contains(&"global:L1:all"));
        assert!(ids.contains(&"global:L2:all"));
        assert!(ids.contains(&"market:L2:m1"));
        // market family at level 1 duplicates global:L1
        assert!(!ids.contains(&"market:L1:m1"));
        assert!(ids.contains(&"type:L2:x"));
        assert_eq!(c.iter().filter(|c| c.is_singleton()).count(), 6);
        let m1 = c.iter().find(|c| c.id == "market:L2:m1").unwrap();
        assert_eq!(m1.gini, gini_imbalance(&[10.0, 30.0]).unwrap());
    }

    fn brute(table: &PoolLossTable, candidates: &[PoolCandidate], lambda: f64) -> f64 {
        let rel = table.relative();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << candidates.len()) {
            let open: Vec<bool> = (0..candidates.len()).map(|g| mask >> g & 1 == 1).collect();
            if let Some(v) = open_set_objective(&rel, candidates, &open, lambda) {
                best = best.min(v);
            }
        }
        best
    }

    fn random_instance(n: usize, k: usize, seed: &[u8]) -> (PoolLossTable, Vec<PoolCandidate>) {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let mut it = seed.iter().cycle().copied();
        let mut candidates = Vec::new();
        for g in 0..k {
            let members: Vec<&str> = ids.iter().filter(|_| it.next().unwrap() % 2 == 0).map(String::as_str).collect();
            if members.len() >= 2 {
                candidates.push(cand(&format!("p{g}"), &members, (it.next().unwrap() % 16) as f64 / 8.0));
            }
        }
        for id in &ids {
            candidates.push(cand(&format!("single:{id}"), &[id], (it.next().unwrap() % 4) as f64 / 8.0));
        }
        let losses: Vec<Vec<Option<f64>>> = ids
            .iter()
            .map(|id| {
                candidates
                    .iter()
                    .map(|c| c.contains(id).then(|| if c.is_singleton() { 1.0 } else { (it.next().unwrap() % 32) as f64 / 16.0 }))
                    .collect()
            })
            .collect();
        (PoolLossTable { series_ids: ids.clone(), baseline: vec![1.0; n], losses }, candidates)
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            n in 2usize..10,
            k in 1usize..6,
            seed in prop::collection::vec(0u8..=255, 128),
            lambda_raw in 0u8..8,
        ) {
            let lambda = lambda_raw as f64 / 4.0;
            let (table, candidates) = random_instance(n, k, &seed);
            let sel = solve_pool_selection(&table, &candidates, lambda).unwrap();
            prop_assert_eq!(sel.objective, brute(&table, &candidates, lambda));
            let milp = solve_by_milp(&table.relative(), &candidates, lambda).unwrap();
            prop_assert!((milp.objective - sel.objective).abs() < 1e-9);
            // induced assignment is the argmin over open pools
            let rel = table.relative();
            for (i, &g) in sel.assignment.iter().enumerate() {
                let best = rel[i].iter().zip(&sel.open).filter(|(_, o)| **o).filter_map(|(l, _)| *l).fold(f64::INFINITY, f64::min);
                prop_assert_eq!(rel[i][g].unwrap(), best);
            }
            // all-singleton fallback is feasible, so never better than optimum
            let singles: Vec<bool> = candidates.iter().map(|c| c.is_singleton()).collect();
            prop_assert!(sel.objective <= open_set_objective(&rel, &candidates, &singles, lambda).unwrap() + 1e-12);
        }

        #[test]
        fn frontier_trades_cost_for_loss(
            n in 2usize..10,
            k in 1usize..6,
            seed in prop::collection::vec(0u8..=255, 128),
        ) {
            let (table, candidates) = random_instance(n, k, &seed);
            let lambdas = [0.0, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0];
            let f = lambda_frontier(&table, &candidates, &lambdas).unwrap();
            for w in f.windows(2) {
                prop_assert!(w[1].open_cost <= w[0].open_cost + 1e-12);
                prop_assert!(w[1].mean_relative_loss >= w[0].mean_relative_loss - 1e-12);
            }
        }
    }
}
