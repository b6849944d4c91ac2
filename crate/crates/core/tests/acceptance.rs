//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use hiercast::evalstats::{hodges_lehmann, wilcoxon_signed_rank, Alternative, PairedDiffs};
use hiercast::features::{
    avm, lag_features, rolling_features, sum_columns, wdi, FeatureSpec, RollingStat, SeriesView, AVM_COVARIATE,
};
use hiercast::metrics::{forecast_bias, mspl, pinball, rmsse, spl, wmape, MetricInput};
use hiercast::panel::{generate_synthetic, SyntheticConfig};
use hiercast::pipeline::{
    cmd_evaluate, cmd_forecast, cmd_pool_select, cmd_reconcile, geometry_example, PipelineConfig,
};
use hiercast::pooling::{solve_pool_selection, PoolCandidate, PoolLossTable};
use hiercast::reconcile::{
    estimate_covariance, reconcile_bu, reconcile_milp, reconcile_mint, reconcile_ols, round_posthoc, weighted_l1,
    CovarianceSpec, MilpBackend, MilpOptions, ReconWeights,
};
use hiercast::strategies::{
    drfam_pp, ensemble, forecast_direct, forecast_hybrid, forecast_recursive, with_aggregate_avm,
    LinearPinballConfig, LinearPinballFactory, PoolAssignment, QuantileGridForecast, StrategyConfig,
};
use hiercast::{build_summing_matrix, check_coherence, HierarchySpec, Month, Panel, PanelSeries, QuantileGrid, SummingMatrix};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: impl Into<String>) -> Outcome {
    if cond {
        Ok(detail.into())
    } else {
        Err(detail.into())
    }
}

fn median_time<T>(runs: usize, mut f: impl FnMut() -> T) -> (T, Duration) {
    let mut times = Vec::with_capacity(runs);
    let mut last = None;
    for _ in 0..runs {
        let t0 = Instant::now();
        last = Some(f());
        times.push(t0.elapsed());
    }
    times.sort();
    (last.expect("at least one run"), times[runs / 2])
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// `(b1, b2, top)` from a `(top, b1, b2)` row vector.
fn leaves_then_top(v: &[f64]) -> [f64; 3] {
    [v[1], v[2], v[0]]
}

fn c1_ols() -> Outcome {
    let (s, base, _) = geometry_example().map_err(|e| e.to_string())?;
    let (y, t) = median_time(11, || reconcile_ols(&s, &base).unwrap());
    let got = leaves_then_top(&y);
    check(
        close(&got, &[2.033, 6.133, 8.167], 1e-3) && t < Duration::from_millis(1),
        format!("OLS {got:.4?}, median {t:?} (tol 1e-3, < 1 ms)"),
    )
}

fn c2_mint() -> Outcome {
    let (s, base, cov) = geometry_example().map_err(|e| e.to_string())?;
    let (y, t) = median_time(11, || reconcile_mint(&s, &base, &cov).unwrap());
    let got = leaves_then_top(&y);
    check(
        close(&got, &[1.716, 6.086, 7.803], 1e-3) && t < Duration::from_millis(1),
        format!("MinT {got:.4?}, median {t:?} (lambda 0.3, tol 1e-3, < 1 ms)"),
    )
}

fn c3_milp() -> Outcome {
    let (s, base, _) = geometry_example().map_err(|e| e.to_string())?;
    let w = ReconWeights::uniform(3);
    let mut results = Vec::new();
    for backend in [MilpBackend::TreeDp, MilpBackend::BranchAndBound] {
        let opts = MilpOptions {
            backend,
            ..Default::default()
        };
        let (r, t) = median_time(11, || reconcile_milp(&s, std::slice::from_ref(&base), &w, false, &opts).unwrap());
        results.push((backend, leaves_then_top(&r.values[0]), r.step_objectives[0], t));
    }
    let mut brute = f64::INFINITY;
    for b1 in 0..=9 {
        for b2 in 0..=9 {
            let x = [(b1 + b2) as f64, b1 as f64, b2 as f64];
            brute = brute.min(x.iter().zip(&base).map(|(x, y)| (x - y).abs()).sum());
        }
    }
    let ok = results
        .iter()
        .all(|(_, v, obj, t)| *v == [2.0, 6.0, 8.0] && *obj == brute && *t < Duration::from_millis(50));
    let detail = results
        .iter()
        .map(|(b, v, obj, t)| format!("{b:?} {v:?} obj {obj} in {t:?}"))
        .collect::<Vec<_>>()
        .join("; ");
    check(ok, format!("{detail}; brute-force min {brute} (exact, < 50 ms)"))
}

fn random_hierarchy(rng: &mut ChaCha8Rng, max_depth: usize, max_bottom: usize) -> SummingMatrix {
    let depth = rng.random_range(1..=max_depth);
    let mut paths: Vec<Vec<String>> = vec![Vec::new()];
    for level in 0..depth {
        let mut next = Vec::new();
        for p in &paths {
            for c in 0..rng.random_range(1..=3) {
                let mut q = p.clone();
                q.push(format!("n{level}_{c}"));
                next.push(q);
            }
        }
        paths = next;
    }
    paths.truncate(max_bottom);
    let names: Vec<String> = (0..depth).map(|l| format!("level{l}")).collect();
    build_summing_matrix(&HierarchySpec::from_key_paths(&names, &paths).unwrap()).unwrap()
}

fn c4_coherence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    let mut total_nodes = 0usize;
    for case in 0..100 {
        let s = random_hierarchy(&mut rng, 3, 30);
        let n = s.n_series();
        let base: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..n).map(|_| rng.random_range(0.0..20.0)).collect())
            .collect();
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let sigma = &a * a.transpose() + DMatrix::identity(n, n);
        let cov = CovarianceSpec::new(sigma, rng.random_range(0.0..1.0));
        let weights = ReconWeights {
            gamma: (0..n).map(|_| rng.random_range(0.1..2.0)).collect(),
            alpha: None,
        };
        let milp = reconcile_milp(&s, &base, &weights, false, &MilpOptions::default()).unwrap();
        total_nodes += milp.node_count;
        for (t, b) in base.iter().enumerate() {
            let outputs = [
                ("BU", reconcile_bu(&s, b).unwrap()),
                ("OLS", reconcile_ols(&s, b).unwrap()),
                ("MinT", reconcile_mint(&s, b, &cov).unwrap()),
                ("REC-MILP", milp.values[t].clone()),
            ];
            for (name, y) in &outputs {
                if !check_coherence(&s, y, 1e-7).unwrap().coherent {
                    failures.push(format!("case {case} {name}"));
                }
            }
            if milp.values[t].iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
                failures.push(format!("case {case} REC-MILP not integer/nonnegative"));
            }
        }
    }
    check(
        failures.is_empty(),
        format!(
            "100 hierarchies x 4 reconcilers x 2 steps, tol 1e-7; failures {:?}",
            &failures[..failures.len().min(5)]
        ),
    )
    .map(|d| format!("{d}; MILP nodes {total_nodes}"))
}

/// Exhaustive minimum of the weighted L1 over the bottom box, one step.
fn lattice_min(s: &SummingMatrix, base: &[f64], w: &[f64], hi: i64) -> f64 {
    let m = s.n_bottom();
    let mut b = vec![0i64; m];
    let mut best = f64::INFINITY;
    loop {
        let x: Vec<f64> = (0..s.n_series())
            .map(|i| (0..m).filter(|&j| s.get(i, j)).map(|j| b[j] as f64).sum())
            .collect();
        let obj: f64 = (0..s.n_series()).map(|i| w[i] * (x[i] - base[i]).abs()).sum();
        best = best.min(obj);
        let mut k = 0;
        loop {
            if k == m {
                return best;
            }
            b[k] += 1;
            if b[k] <= hi {
                break;
            }
            b[k] = 0;
            k += 1;
        }
    }
}

fn c5_lattice() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = Vec::new();
    for case in 0..50 {
        let s = random_hierarchy(&mut rng, 2, 3);
        let n = s.n_series();
        let h = rng.random_range(1..=2);
        // dyadic data keep every objective exactly representable
        let base: Vec<Vec<f64>> = (0..h)
            .map(|_| (0..n).map(|_| rng.random_range(0..=20) as f64 / 4.0).collect())
            .collect();
        let gamma: Vec<f64> = (0..n).map(|_| rng.random_range(1..=8) as f64 / 4.0).collect();
        let weights = ReconWeights {
            gamma: gamma.clone(),
            alpha: None,
        };
        for backend in [MilpBackend::TreeDp, MilpBackend::BranchAndBound] {
            let opts = MilpOptions {
                backend,
                ..Default::default()
            };
            let r = reconcile_milp(&s, &base, &weights, false, &opts).unwrap();
            for t in 0..h {
                let brute = lattice_min(&s, &base[t], &gamma, 10);
                let got = weighted_l1(&gamma, &base[t], &r.values[t]);
                if got != brute || r.step_objectives[t] != brute {
                    mismatches.push(format!("case {case} {backend:?} step {t}: {got} vs {brute}"));
                }
            }
        }
    }
    check(
        mismatches.is_empty(),
        format!("50 instances (<= 3 bottoms, H <= 2, box 0..10), both backends, exact; mismatches {mismatches:?}"),
    )
}

fn c6_pool_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut problems = Vec::new();
    for case in 0..50 {
        let n = rng.random_range(3..=12);
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:02}")).collect();
        let mut candidates: Vec<PoolCandidate> = Vec::new();
        let mk = |id: String, members: Vec<String>, cost: f64| PoolCandidate {
            id,
            model_count: 1,
            gini: 0.0,
            cost,
            members,
        };
        candidates.push(mk("all".into(), ids.clone(), rng.random_range(0..=16) as f64 / 4.0));
        while candidates.len() < 8 {
            let k = candidates.len();
            if rng.random_bool(0.3) {
                let i = rng.random_range(0..n);
                candidates.push(mk(format!("single:{k}"), vec![ids[i].clone()], rng.random_range(0..=4) as f64 / 4.0));
            } else {
                let members: Vec<String> = ids.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
                if members.len() >= 2 {
                    candidates.push(mk(format!("p{k}"), members, rng.random_range(0..=16) as f64 / 4.0));
                }
            }
        }
        let losses: Vec<Vec<Option<f64>>> = ids
            .iter()
            .map(|id| {
                candidates
                    .iter()
                    .map(|c| c.contains(id).then(|| rng.random_range(0..=32) as f64 / 8.0))
                    .collect()
            })
            .collect();
        let baseline: Vec<f64> = (0..n).map(|_| rng.random_range(0..=16) as f64 / 8.0).collect();
        let table = PoolLossTable {
            series_ids: ids.clone(),
            baseline: baseline.clone(),
            losses: losses.clone(),
        };
        for lambda in [0.0, 0.5, 1.0, 4.0] {
            let sel = solve_pool_selection(&table, &candidates, lambda).unwrap();
            // brute force over all 2^8 open sets, relative losses
            let mut best = f64::INFINITY;
            for mask in 0u32..(1 << candidates.len()) {
                let mut total = 0.0;
                let mut feasible = true;
                for i in 0..n {
                    let v = (0..candidates.len())
                        .filter(|g| mask >> g & 1 == 1)
                        .filter_map(|g| losses[i][g].map(|l| l - baseline[i]))
                        .fold(f64::INFINITY, f64::min);
                    if v == f64::INFINITY {
                        feasible = false;
                        break;
                    }
                    total += v;
                }
                if feasible {
                    for g in 0..candidates.len() {
                        if mask >> g & 1 == 1 {
                            total += lambda * candidates[g].cost;
                        }
                    }
                    best = best.min(total);
                }
            }
            if sel.objective != best {
                problems.push(format!("case {case} lambda {lambda}: {} vs {best}", sel.objective));
            }
            if lambda == 0.0 {
                for i in 0..n {
                    let argmin = losses[i].iter().flatten().fold(f64::INFINITY, |a, b| a.min(*b));
                    if losses[i][sel.assignment[i]] != Some(argmin) {
                        problems.push(format!("case {case}: series {i} not at its argmin"));
                    }
                }
            }
        }
    }
    check(
        problems.is_empty(),
        format!("50 instances (<= 12 series, 8 candidates, 4 lambdas) vs 2^8 enumeration, exact; {problems:?}"),
    )
}

fn c7_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = QuantileGrid::default();
    let mut problems = Vec::new();
    let mut worst = 0.0_f64;
    for case in 0..100 {
        let t = rng.random_range(3..30);
        let h = rng.random_range(1..8);
        let insample: Vec<f64> = (0..t).map(|_| rng.random_range(1..40) as f64).collect();
        let actual: Vec<f64> = (0..h).map(|_| rng.random_range(0.0..40.0)).collect();
        let forecast: Vec<f64> = (0..h).map(|_| rng.random_range(0.0..40.0)).collect();
        let Ok(m) = MetricInput::new(&insample, &actual) else { continue };
        let perfect = [
            rmsse(&m, &actual),
            wmape(&m, &actual),
            forecast_bias(&m, &actual).map(f64::abs),
        ];
        let spls: Vec<f64> = grid.as_slice().iter().map(|&q| spl(&m, q, &actual).unwrap()).collect();
        if perfect.iter().any(|r| !matches!(r, Ok(v) if *v == 0.0)) || spls.iter().any(|v| *v != 0.0) {
            problems.push(format!("case {case}: perfect forecast scored nonzero"));
        }
        let naive: f64 = insample.windows(2).filter(|w| w[1] != 0.0).map(|w| (w[1] - w[0]).abs()).sum::<f64>()
            / insample.windows(2).filter(|w| w[1] != 0.0).count() as f64;
        if naive == 0.0 {
            continue;
        }
        let mae: f64 = actual.iter().zip(&forecast).map(|(y, f)| (y - f).abs()).sum::<f64>() / h as f64;
        let half = 0.5 * mae / naive;
        let s05 = spl(&m, 0.5, &forecast).unwrap();
        worst = worst.max((s05 - half).abs());
        let single = QuantileGrid::new(vec![0.5]).unwrap();
        let ms = mspl(&m, &single, std::slice::from_ref(&forecast)).unwrap();
        if ms != s05 {
            problems.push(format!("case {case}: MSPL {ms} != SPL {s05}"));
        }
        let direct: f64 = actual.iter().zip(&forecast).map(|(y, f)| pinball(*y, *f, 0.5)).sum::<f64>();
        if direct < 0.0 {
            problems.push("negative pinball".into());
        }
    }
    check(
        problems.is_empty() && worst <= 1e-12,
        format!("100 cases; max |SPL(0.5) - MAE/2 scaled| = {worst:.2e} (tol 1e-12); {problems:?}"),
    )
}

fn low_volume_panel(seed: u64) -> Panel {
    generate_synthetic(&SyntheticConfig {
        markets: 3,
        clusters: 2,
        lines_per_cluster: 2,
        types_per_line: 3,
        months: 60,
        base_volume: 1.5,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn c8_rounding_bias() -> Outcome {
    let panel = low_volume_panel(8);
    let s = &panel.summing;
    let n = s.n_series();
    let errors: Vec<Vec<f64>> = (1..48)
        .map(|t| panel.series.iter().map(|x| x.target[t] - x.target[t - 1]).collect())
        .collect();
    let cov = estimate_covariance(&errors, 0.3).unwrap();
    let weights = ReconWeights::uniform(n);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mint_incoherent = 0;
    let mut milp_incoherent = 0;
    let mut dominance_failures = 0;
    let mut compared = 0;
    for case in 0..100 {
        let t = 48 + case % 12;
        let base: Vec<f64> = panel
            .series
            .iter()
            .map(|x| {
                let y = x.target[t];
                let sd = 0.3 + 0.2 * y.sqrt();
                (y + Normal::new(0.0, sd).unwrap().sample(&mut rng)).max(0.0)
            })
            .collect();
        let rounded = round_posthoc(s, &reconcile_mint(s, &base, &cov).unwrap()).unwrap();
        if !rounded.coherence.coherent {
            mint_incoherent += 1;
        }
        let milp = reconcile_milp(s, std::slice::from_ref(&base), &weights, false, &MilpOptions::default()).unwrap();
        let x = &milp.values[0];
        if !check_coherence(s, x, 0.0).unwrap().coherent || x.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            milp_incoherent += 1;
        }
        let milp_obj = weighted_l1(&weights.gamma, &base, x);
        // coherent integer comparator: rounded MinT bottoms aggregated upward
        let mut bu_base = vec![0.0; n];
        for &r in s.bottom_rows() {
            bu_base[r] = rounded.values[r].max(0.0);
        }
        let bu_round = reconcile_bu(s, &bu_base).unwrap();
        compared += 1;
        if milp_obj > weighted_l1(&weights.gamma, &base, &bu_round) {
            dominance_failures += 1;
        }
        if rounded.coherence.coherent {
            compared += 1;
            if milp_obj > weighted_l1(&weights.gamma, &base, &rounded.values) {
                dominance_failures += 1;
            }
        }
    }
    check(
        mint_incoherent >= 1 && milp_incoherent == 0 && dominance_failures == 0,
        format!(
            "MinT+round incoherent {mint_incoherent}/100, REC-MILP incoherent {milp_incoherent}/100, \
             MILP objective worse than a coherent integer comparator in {dominance_failures}/{compared}"
        ),
    )
}

fn small_panel(seed: u64) -> Panel {
    generate_synthetic(&SyntheticConfig {
        markets: 2,
        clusters: 1,
        lines_per_cluster: 2,
        types_per_line: 2,
        months: 48,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn c9_strategy_algebra() -> Outcome {
    let panel = with_aggregate_avm(&small_panel(9), 3).unwrap();
    let factory = LinearPinballFactory(LinearPinballConfig {
        iterations: 80,
        ..Default::default()
    });
    let grid = QuantileGrid::default();
    let cfg = StrategyConfig::default();
    let pools = PoolAssignment::by_level(&panel);
    let t = panel.len();
    let d = forecast_direct(&factory, &panel, t, 1, &grid, &pools, &cfg).unwrap();
    let r = forecast_recursive(&factory, &panel, t, 1, &grid, &pools, &cfg).unwrap();
    let h = forecast_hybrid(&factory, &panel, t, 1, &grid, &pools, &cfg).unwrap();
    let h1 = d == r && d == h;

    let ids: Vec<String> = panel.series.iter().map(|s| s.series_id.clone()).collect();
    let one = PoolAssignment::global(&ids);
    let dr = drfam_pp(&factory, &panel, t, 3, &grid, &one, &cfg).unwrap();
    let d3 = forecast_direct(&factory, &panel, t, 3, &grid, &one, &cfg).unwrap();
    let r3 = forecast_recursive(&factory, &panel, t, 3, &grid, &one, &cfg).unwrap();
    let mut worst = 0.0_f64;
    for i in 0..ids.len() {
        for step in 0..3 {
            for q in 0..grid.len() {
                let mean = (d3.get(i, step, q) + r3.get(i, step, q)) / 2.0;
                worst = worst.max((dr.get(i, step, q) - mean).abs());
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ensemble_ok = 0;
    for _ in 0..100 {
        let k = rng.random_range(2..=5);
        let members: Vec<QuantileGridForecast> = (0..k)
            .map(|_| {
                let mut f = QuantileGridForecast::zeros(vec!["a".into(), "b".into(), "c".into()], 2, grid.clone());
                for i in 0..3 {
                    for step in 0..2 {
                        for q in 0..grid.len() {
                            f.set(i, step, q, rng.random_range(-5.0..50.0));
                        }
                    }
                }
                f
            })
            .collect();
        let refs: Vec<&QuantileGridForecast> = members.iter().collect();
        let base = ensemble(&refs).unwrap();
        let mut shuffled = refs.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let other = ensemble(&shuffled).unwrap();
        let nonneg = (0..3).all(|i| (0..2).all(|s| base.step(i, s).iter().all(|v| *v >= 0.0)));
        if base == other && base.is_non_crossing() && nonneg {
            ensemble_ok += 1;
        }
    }
    check(
        h1 && worst <= 1e-12 && ensemble_ok == 100 && dr.is_non_crossing(),
        format!(
            "DIR=REC=HYB at H=1: {h1}; max |DRFAM-PP - (DIR+REC)/2| = {worst:.1e} (tol 1e-12); \
             ensemble invariant and non-crossing in {ensemble_ok}/100"
        ),
    )
}

fn c10_avm_leakage() -> Outcome {
    let start: Month = "2019-01".parse().unwrap();
    let intro: Month = "2018-11".parse().unwrap();
    let n = 30i32;
    let ts: Vec<Month> = (0..n).map(|k| start.offset(k)).collect();
    let leaf = |k: usize, y: Vec<f64>| PanelSeries {
        series_id: String::new(),
        key_path: vec![format!("leaf{k}")],
        timestamps: ts.clone(),
        target: y,
        covariates: BTreeMap::new(),
        intro_date: Some(intro),
    };
    let a: Vec<f64> = (0..n).map(|t| ((t * 7) % 11) as f64).collect();
    let b: Vec<f64> = (0..n).map(|t| ((t * 5) % 13 + 2) as f64).collect();
    let panel = Panel::from_bottom(&["leaf"], vec![leaf(0, a.clone()), leaf(1, b.clone())]).unwrap();
    let mut additive = true;
    let mut worst_k3 = 0.0_f64;
    for k in [1usize, 2, 3, 4] {
        let with = with_aggregate_avm(&panel, k).unwrap();
        let total = with.summing.row_index("total").unwrap();
        let carried = with.series[total].covariate(AVM_COVARIATE).unwrap().to_vec();
        let ca = avm(&a, &ts, intro, k).unwrap();
        let cb = avm(&b, &ts, intro, k).unwrap();
        let summed = sum_columns(&[&ca, &cb]).unwrap();
        let direct = avm(&with.series[total].target, &ts, intro, k).unwrap();
        additive &= carried == summed.values;
        for (x, y) in summed.values.iter().zip(&direct.values) {
            match (x, y) {
                (Some(x), Some(y)) if k.is_power_of_two() => additive &= x == y,
                (Some(x), Some(y)) => worst_k3 = worst_k3.max((x - y).abs() / y.abs().max(1.0)),
                (None, None) => {}
                _ => additive = false,
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let spec = FeatureSpec::default();
    let mut leaks = 0;
    let mut rows_checked = 0;
    for _ in 0..100 {
        let len = rng.random_range(16..40);
        let y: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..50.0)).collect();
        let visits: Vec<Option<f64>> = (0..len).map(|_| rng.random_bool(0.9).then(|| rng.random_range(0.0..500.0))).collect();
        let covs = BTreeMap::from([("visits".to_string(), visits.clone())]);
        let ts: Vec<Month> = (0..len as i32).map(|k| start.offset(k)).collect();
        let full_view = SeriesView {
            target: &y,
            start,
            intro: Some(intro),
            covariates: &covs,
        };
        let cut = rng.random_range(spec.warmup() + 1..len);
        let short_covs = BTreeMap::from([("visits".to_string(), visits[..cut].to_vec())]);
        let short_view = SeriesView {
            target: &y[..cut],
            start,
            intro: Some(intro),
            covariates: &short_covs,
        };
        for t in spec.warmup()..=cut {
            rows_checked += 1;
            let full = spec.row(&full_view, t, t - 1, t);
            let short = spec.row(&short_view, t, t - 1, t);
            if full.iter().map(|v| v.to_bits()).ne(short.iter().map(|v| v.to_bits())) {
                leaks += 1;
            }
        }
        let columns = |y: &[f64], v: &[Option<f64>], ts: &[Month]| {
            let mut c = lag_features(y, &[1, 2, 3, 6, 12]);
            c.extend(rolling_features(y, &[1, 3, 6], &[RollingStat::Min, RollingStat::Max, RollingStat::Mean, RollingStat::Std]));
            c.push(avm(y, ts, intro, 3).unwrap());
            c.push(wdi(v, y, 3).unwrap());
            c
        };
        let full = columns(&y, &visits, &ts);
        let short = columns(&y[..cut - 1], &visits[..cut - 1], &ts[..cut - 1]);
        for (f, s) in full.iter().zip(&short) {
            for t in 0..cut - 1 {
                if f.values[t].map(f64::to_bits) != s.values[t].map(f64::to_bits) {
                    leaks += 1;
                }
            }
        }
    }
    check(
        additive && worst_k3 <= 1e-12 && leaks == 0,
        format!(
            "AVM sum over leaves = aggregate AVM: bit-exact for k in {{1,2,4}} and covariate {additive}, \
             k=3 max rel gap {worst_k3:.1e}; leakage violations {leaks} over {rows_checked} rows + column truncations"
        ),
    )
}

fn c11_evalstats() -> Outcome {
    let w = wilcoxon_signed_rank(&PairedDiffs::new(&[-3.0, -1.0, -2.0]).unwrap(), Alternative::Less).unwrap();
    let hl = hodges_lehmann(&[1.0, 3.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut antisym = 0;
    for _ in 0..100 {
        let n = rng.random_range(3..60);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-20..=20) as f64 / 2.0).collect();
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        let (Ok(pd), Ok(pn)) = (PairedDiffs::new(&d), PairedDiffs::new(&neg)) else { continue };
        if pd.n_r() == 0 {
            antisym += 1;
            continue;
        }
        let a = wilcoxon_signed_rank(&pd, Alternative::Less).unwrap();
        let b = wilcoxon_signed_rank(&pn, Alternative::Greater).unwrap();
        let t2a = wilcoxon_signed_rank(&pd, Alternative::TwoSided).unwrap();
        let t2b = wilcoxon_signed_rank(&pn, Alternative::TwoSided).unwrap();
        let nr = pd.n_r() as f64;
        let checks = [
            a.p_value == b.p_value,
            t2a.p_value == t2b.p_value,
            a.v + b.v == nr * (nr + 1.0) / 2.0,
            a.rank_biserial == -b.rank_biserial,
            hodges_lehmann(pd.values()).unwrap() == -hodges_lehmann(pn.values()).unwrap(),
        ];
        if checks.iter().all(|c| *c) {
            antisym += 1;
        }
    }
    check(
        w.p_value == 0.125 && w.exact && hl == 2.0 && antisym == 100,
        format!(
            "exact p = {} for (-3,-1,-2) 'less'; HL(1,3) = {hl}; sign-flip antisymmetry {antisym}/100",
            w.p_value
        ),
    )
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let rel = path.strip_prefix(root).unwrap().to_path_buf();
            if rel.starts_with("timings") {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn c12_determinism_and_scale() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut small = PipelineConfig::from_toml(
        "seed = 12\nhorizon = 3\nwindows = 2\n\
         [data.synthetic]\nmarkets = 3\nmonths = 60\n\
         [forecast]\nmethods = [\"snaive\", \"drfam\"]\nlearner_params = { iterations = 60 }\n",
    )
    .map_err(|e| e.to_string())?;
    let mut snaps = Vec::new();
    for run in ["a", "b"] {
        small.output_dir = tmp.path().join(run);
        cmd_forecast(&small).map_err(|e| e.to_string())?;
        cmd_reconcile(&small).map_err(|e| e.to_string())?;
        cmd_evaluate(&small).map_err(|e| e.to_string())?;
        snaps.push(snapshot(&small.output_dir));
    }
    let identical = snaps[0] == snaps[1];
    let files = snaps[0].len();

    let desk = PipelineConfig {
        output_dir: tmp.path().join("desk"),
        ..PipelineConfig::default()
    };
    let t0 = Instant::now();
    cmd_forecast(&desk).map_err(|e| e.to_string())?;
    let t_forecast = t0.elapsed();
    cmd_pool_select(&desk).map_err(|e| e.to_string())?;
    let t_pool = t0.elapsed() - t_forecast;
    cmd_reconcile(&desk).map_err(|e| e.to_string())?;
    cmd_evaluate(&desk).map_err(|e| e.to_string())?;
    let total = t0.elapsed();
    let threads = rayon::current_num_threads();
    check(
        identical && total < Duration::from_secs(300),
        format!(
            "two runs byte-identical over {files} files: {identical}; desk scale (23 markets x 20 types, 120 months, \
             H=6, 3 windows) forecast {:.1}s + pool-select {:.1}s, total {:.1}s on {threads} thread(s) (< 300 s)",
            t_forecast.as_secs_f64(),
            t_pool.as_secs_f64(),
            total.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("worked example: OLS reproduction", c1_ols),
        ("worked example: MinT-shrink reproduction", c2_mint),
        ("worked example: REC-MILP reproduction", c3_milp),
        ("coherence suite", c4_coherence),
        ("MILP lattice oracle", c5_lattice),
        ("POOL-SEL-BP enumeration oracle", c6_pool_selection),
        ("metric identities", c7_metrics),
        ("rounding-bias demonstration", c8_rounding_bias),
        ("strategy algebra", c9_strategy_algebra),
        ("AVM additivity and leakage", c10_avm_leakage),
        ("Wilcoxon / Hodges-Lehmann", c11_evalstats),
        ("determinism and desk scale", c12_determinism_and_scale),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
