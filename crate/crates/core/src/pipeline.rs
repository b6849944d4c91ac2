//! Batch pipeline driven by a TOML config.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! panel.csv                          simulate
//! forecasts/w<k>/<method>.csv        forecast (QuantileGridForecast CSV)
//! metrics.csv                        forecast (per method x level)
//! pooling/{candidates,losses,frontier}.csv, pooling/pools.json
//! reconciled/w<k>/<method>.csv       reconcile (series_id, step, value)
//! reconcile_report.csv               reconcile (per window x method x level)
//! evaluation.csv                     evaluate
//! timings/<command>.json             wall-clock seconds, kept apart from results
//! ```
//!
//! Everything except `timings/` is a deterministic function of the config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::{forecast_quantiles, BaselineConfig};
use crate::error::{Error, Result};
use crate::evalstats::{compare_methods, Alternative, ComparisonRow, COMPARISON_COLUMNS};
use crate::hierarchy::{build_summing_matrix, check_coherence, HierarchySpec, SummingMatrix};
use crate::metrics::{forecast_bias, mspl, pinball, rmsse, wmape, MetricInput, QuantileGrid, DEFAULT_QUANTILES};
use crate::panel::{
    generate_synthetic, load_panel, rolling_windows, write_panel_csv, Panel, PanelSchema, SplitPlan,
    SyntheticConfig, Window,
};
use crate::pooling::{
    build_candidates, calibrate_scale, elbow_index, lambda_frontier, PoolCandidate, PoolFamily, PoolLossTable,
    SeriesMeta,
};
use crate::reconcile::{
    estimate_covariance, gamma_from_validation, reconcile_bu, reconcile_milp, reconcile_mint, reconcile_ols,
    round_posthoc, CovarianceSpec, MilpOptions, ReconWeights,
};
use crate::strategies::{
    forecast_pool, forecast_pooled, learner_factory, with_aggregate_avm, LearnerFactory, Pool, PoolAssignment,
    QuantileGridForecast, Strategy, StrategyConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds the synthetic generator and every learner fit.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub horizon: usize,
    /// Rolling test windows; the last one ends with the data.
    pub windows: usize,
    pub quantiles: Vec<f64>,
    pub data: DataConfig,
    pub forecast: ForecastConfig,
    pub pooling: PoolingConfig,
    pub reconcile: ReconcileConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("out"),
            horizon: 6,
            windows: 3,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            data: DataConfig::default(),
            forecast: ForecastConfig::default(),
            pooling: PoolingConfig::default(),
            reconcile: ReconcileConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Long-format panel CSV; the synthetic generator is used when absent.
    pub path: Option<PathBuf>,
    pub schema: PanelSchema,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// Baselines `naive`, `snaive`, `ses`, `ma<k>` and learner strategies
    /// `dir`, `rec`, `hyb`, `drfam`.
    pub methods: Vec<String>,
    pub learner: String,
    pub learner_params: Option<serde_json::Value>,
    /// `local`, `level`, `global`, or a path to a pools JSON file.
    pub pools: String,
    pub strategy: StrategyConfig,
    pub season_length: usize,
    pub ses_alpha: f64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            methods: ["naive", "snaive", "ses", "drfam"].map(String::from).to_vec(),
            learner: "linear_pinball".into(),
            learner_params: None,
            pools: "level".into(),
            strategy: StrategyConfig::default(),
            season_length: 12,
            ses_alpha: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolingConfig {
    pub families: Vec<PoolFamily>,
    /// Strategies averaged when scoring a candidate pool.
    pub strategies: Vec<Strategy>,
    pub lambdas: Vec<f64>,
    /// Fixed lambda; skips the elbow search.
    pub lambda: Option<f64>,
    pub nu: f64,
    /// Cost scale; calibrated from the loss table when absent.
    pub scale: Option<f64>,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            families: vec![
                PoolFamily {
                    name: "level".into(),
                    group_by: Vec::new(),
                },
                PoolFamily {
                    name: "cluster".into(),
                    group_by: vec!["product_cluster".into()],
                },
            ],
            strategies: vec![Strategy::Dir, Strategy::Rec],
            lambdas: vec![0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0],
            lambda: None,
            nu: 1.0,
            scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconcileConfig {
    /// Forecast method whose median paths are reconciled.
    pub base: String,
    pub methods: Vec<String>,
    pub shrink_lambda: f64,
    /// Bottom-level weight of the level-weighted variant.
    pub alpha_bottom: f64,
    /// Trailing months used for the per-series WMAPE behind gamma.
    pub gamma_months: usize,
}

pub const RECONCILE_METHODS: [&str; 7] = ["bu", "bu+round", "ols", "mint", "mint+round", "rec-milp", "rec-milp-lw"];

impl Default for ReconcileConfig {
    fn default() -> Self {
        Self {
            base: "drfam".into(),
            methods: RECONCILE_METHODS.map(String::from).to_vec(),
            shrink_lambda: 0.3,
            alpha_bottom: 0.4,
            gamma_months: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// `(a, b)` pairs; each name is a forecast method or a reconciliation method.
    pub pairs: Vec<(String, String)>,
    pub alternative: AlternativeName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlternativeName {
    Less,
    Greater,
    TwoSided,
}

impl From<AlternativeName> for Alternative {
    fn from(a: AlternativeName) -> Self {
        match a {
            AlternativeName::Less => Alternative::Less,
            AlternativeName::Greater => Alternative::Greater,
            AlternativeName::TwoSided => Alternative::TwoSided,
        }
    }
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            pairs: vec![
                ("drfam".into(), "snaive".into()),
                ("rec-milp".into(), "mint+round".into()),
            ],
            alternative: AlternativeName::Less,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.windows == 0 {
            return Err(Error::Config("windows must be >= 1".into()));
        }
        self.grid()?;
        self.factory()?;
        for m in &self.forecast.methods {
            self.method(m)?;
        }
        if self.forecast.methods.is_empty() {
            return Err(Error::Config("no forecast methods".into()));
        }
        for m in &self.reconcile.methods {
            if !RECONCILE_METHODS.contains(&m.as_str()) {
                return Err(Error::Config(format!("unknown reconciliation method {m:?}")));
            }
        }
        self.method(&self.reconcile.base)?;
        if !(0.0..=1.0).contains(&self.reconcile.shrink_lambda) || !(0.0..=1.0).contains(&self.reconcile.alpha_bottom) {
            return Err(Error::Config("shrink_lambda and alpha_bottom must lie in [0, 1]".into()));
        }
        if self.pooling.strategies.is_empty() || (self.pooling.lambda.is_none() && self.pooling.lambdas.is_empty()) {
            return Err(Error::Config("pooling needs strategies and a lambda grid".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<QuantileGrid> {
        QuantileGrid::new(self.quantiles.clone()).map_err(|e| Error::Config(e.to_string()))
    }

    fn factory(&self) -> Result<std::sync::Arc<dyn LearnerFactory>> {
        learner_factory(&self.forecast.learner, self.forecast.learner_params.as_ref())
    }

    fn strategy_config(&self) -> StrategyConfig {
        StrategyConfig {
            seed: self.seed,
            ..self.forecast.strategy.clone()
        }
    }

    fn method(&self, name: &str) -> Result<Method> {
        let f = &self.forecast;
        Ok(match name {
            "naive" => Method::Baseline(BaselineConfig::naive()),
            "snaive" => Method::Baseline(BaselineConfig::snaive(f.season_length)),
            "ses" => Method::Baseline(BaselineConfig::ses(f.ses_alpha)),
            "dir" => Method::Learned(vec![Strategy::Dir]),
            "rec" => Method::Learned(vec![Strategy::Rec]),
            "hyb" => Method::Learned(vec![Strategy::Hyb]),
            "drfam" => Method::Learned(vec![Strategy::Dir, Strategy::Rec]),
            other => match other.strip_prefix("ma").and_then(|k| k.parse().ok()) {
                Some(k) if k >= 1 => Method::Baseline(BaselineConfig::ma(k)),
                _ => return Err(Error::Config(format!("unknown forecast method {other:?}"))),
            },
        })
    }

    fn load_panel(&self) -> Result<Panel> {
        match &self.data.path {
            Some(path) => load_panel(path, &self.data.schema),
            None => generate_synthetic(&SyntheticConfig {
                seed: self.seed,
                ..self.data.synthetic.clone()
            }),
        }
    }

    fn windows(&self, panel: &Panel) -> Result<Vec<Window>> {
        let plan = SplitPlan::ending_at(panel.len(), self.horizon, self.windows)?;
        rolling_windows(&plan, panel.len())
    }
}

enum Method {
    Baseline(BaselineConfig),
    Learned(Vec<Strategy>),
}

fn ctx<T>(r: Result<T>, context: impl FnOnce() -> String) -> Result<T> {
    r.map_err(|e| e.with_context(context()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))
}

fn create_file(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::File::create(path).map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

fn open_file(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))
}

fn write_timings(dir: &Path, command: &str, entries: &[(String, f64)]) -> Result<()> {
    let map: BTreeMap<&str, f64> = entries.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let file = create_file(&dir.join("timings").join(format!("{command}.json")))?;
    serde_json::to_writer_pretty(file, &map)?;
    Ok(())
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn fmt3(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
}

/// Per-level mean of the defined scores; `None` for levels without any.
fn level_means(scores: &[(usize, f64)], n_levels: usize) -> Vec<Option<f64>> {
    let mut sums = vec![(0.0, 0usize); n_levels];
    for &(l, v) in scores {
        sums[l].0 += v;
        sums[l].1 += 1;
    }
    sums.into_iter().map(|(s, c)| (c > 0).then(|| s / c as f64)).collect()
}

/// Writes the bottom series of the configured panel to `panel.csv`.
pub fn cmd_simulate(cfg: &PipelineConfig) -> Result<String> {
    let panel = cfg.load_panel()?;
    let path = cfg.output_dir.join("panel.csv");
    write_panel_csv(create_file(&path)?, &panel, &cfg.data.schema)?;
    Ok(format!(
        "wrote {} ({} bottom series, {} series in total, {} months)\n",
        path.display(),
        panel.summing.n_bottom(),
        panel.n_series(),
        panel.len()
    ))
}

fn pool_assignment(cfg: &PipelineConfig, panel: &Panel) -> Result<PoolAssignment> {
    let ids: Vec<String> = panel.series.iter().map(|s| s.series_id.clone()).collect();
    Ok(match cfg.forecast.pools.as_str() {
        "local" => PoolAssignment::singletons(&ids),
        "level" => PoolAssignment::by_level(panel),
        "global" => PoolAssignment::global(&ids),
        path => serde_json::from_reader(open_file(Path::new(path))?)?,
    })
}

fn run_method(
    cfg: &PipelineConfig,
    panel: &Panel,
    method: &Method,
    origin: usize,
    pools: &PoolAssignment,
    factory: &dyn LearnerFactory,
) -> Result<QuantileGridForecast> {
    let grid = cfg.grid()?;
    match method {
        Method::Baseline(b) => {
            let ids = panel.series.iter().map(|s| s.series_id.clone()).collect();
            let mut fc = QuantileGridForecast::zeros(ids, cfg.horizon, grid.clone());
            for (i, s) in panel.series.iter().enumerate() {
                let rows = ctx(forecast_quantiles(b, &s.target[..origin], cfg.horizon, &grid), || {
                    format!("series {}", s.series_id)
                })?;
                for (h, row) in rows.iter().enumerate() {
                    fc.step_mut(i, h).copy_from_slice(row);
                }
            }
            Ok(fc)
        }
        Method::Learned(strategies) => forecast_pooled(
            factory,
            panel,
            origin,
            cfg.horizon,
            &grid,
            strategies,
            pools,
            &cfg.strategy_config(),
        ),
    }
}

/// Scores of one series: RMSSE, WMAPE and FB of the median path, MSPL over the grid.
fn score_series(insample: &[f64], actual: &[f64], fc: &QuantileGridForecast, i: usize) -> Result<[Option<f64>; 4]> {
    let m = MetricInput::new(insample, actual)?;
    let median = fc.median_path(i);
    let paths: Vec<Vec<f64>> = (0..fc.grid().len()).map(|q| fc.path(i, q)).collect();
    let defined = |r: Result<f64>| -> Result<Option<f64>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok([
        defined(rmsse(&m, &median))?,
        defined(wmape(&m, &median))?,
        defined(forecast_bias(&m, &median))?,
        defined(mspl(&m, fc.grid(), &paths))?,
    ])
}

fn forecast_path(dir: &Path, window: usize, method: &str) -> PathBuf {
    dir.join("forecasts").join(format!("w{window}")).join(format!("{method}.csv"))
}

fn reconciled_path(dir: &Path, window: usize, method: &str) -> PathBuf {
    dir.join("reconciled").join(format!("w{window}")).join(format!("{method}.csv"))
}

const METRIC_NAMES: [&str; 4] = ["rmsse", "wmape", "bias", "mspl"];

/// Rolling-window forecasts for every configured method plus per-level metrics.
pub fn cmd_forecast(cfg: &PipelineConfig) -> Result<String> {
    cfg.validate()?;
    let started = Instant::now();
    let mut panel = cfg.load_panel()?;
    if let Some(k) = cfg.forecast.strategy.features.avm_k {
        panel = with_aggregate_avm(&panel, k)?;
    }
    let windows = cfg.windows(&panel)?;
    let pools = pool_assignment(cfg, &panel)?;
    let factory = cfg.factory()?;
    let n_levels = panel.summing.n_levels();
    let mut timings = Vec::new();
    let mut table = String::new();
    let mut csv_rows: Vec<Vec<String>> = Vec::new();
    for name in &cfg.forecast.methods {
        let method = cfg.method(name)?;
        let t0 = Instant::now();
        let mut scores: [Vec<(usize, f64)>; 4] = Default::default();
        for (w, win) in windows.iter().enumerate() {
            let fc = ctx(run_method(cfg, &panel, &method, win.origin, &pools, factory.as_ref()), || {
                format!("window {w}, method {name}")
            })?;
            fc.write_csv(create_file(&forecast_path(&cfg.output_dir, w, name))?)?;
            for (i, s) in panel.series.iter().enumerate() {
                let sc = ctx(score_series(&s.target[..win.origin], &s.target[win.test.clone()], &fc, i), || {
                    format!("window {w}, method {name}, series {}", s.series_id)
                })?;
                for (k, v) in sc.iter().enumerate() {
                    if let Some(v) = v {
                        scores[k].push((panel.level_of(i), *v));
                    }
                }
            }
        }
        timings.push((name.clone(), t0.elapsed().as_secs_f64()));
        let means: Vec<Vec<Option<f64>>> = scores.iter().map(|s| level_means(s, n_levels)).collect();
        for level in 0..n_levels {
            let mut row = vec![name.clone(), panel.hierarchy.levels[level].clone()];
            row.extend(means.iter().map(|m| opt_cell(m[level])));
            csv_rows.push(row);
            let _ = writeln!(
                table,
                "{:<8} {:<16} {:>7} {:>7} {:>7} {:>7}",
                name,
                panel.hierarchy.levels[level],
                fmt3(means[0][level]),
                fmt3(means[1][level]),
                fmt3(means[2][level]),
                fmt3(means[3][level])
            );
        }
    }
    let mut w = csv::Writer::from_writer(create_file(&cfg.output_dir.join("metrics.csv"))?);
    let mut header = vec!["method", "level"];
    header.extend(METRIC_NAMES);
    w.write_record(&header)?;
    for row in csv_rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    timings.push(("total".into(), started.elapsed().as_secs_f64()));
    write_timings(&cfg.output_dir, "forecast", &timings)?;
    Ok(format!(
        "{:<8} {:<16} {:>7} {:>7} {:>7} {:>7}\n{table}",
        "method", "level", "RMSSE", "WMAPE", "FB", "MSPL"
    ))
}

fn series_meta(panel: &Panel, end: usize) -> Vec<SeriesMeta> {
    let names = &panel.hierarchy.levels;
    panel
        .series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let level = panel.level_of(i);
            let keys = s
                .key_path
                .iter()
                .enumerate()
                .map(|(k, v)| (names[k + 1].clone(), v.clone()))
                .collect();
            let first = s.target[..end].iter().position(|v| *v > 0.0).unwrap_or(end);
            SeriesMeta {
                id: s.series_id.clone(),
                level,
                keys,
                n_obs: end - first,
            }
        })
        .collect()
}

/// Validation MSPL; the raw mean pinball loss when the scale is undefined.
fn validation_loss(insample: &[f64], actual: &[f64], fc: &QuantileGridForecast, i: usize) -> Result<f64> {
    let m = MetricInput::new(insample, actual)?;
    let paths: Vec<Vec<f64>> = (0..fc.grid().len()).map(|q| fc.path(i, q)).collect();
    match mspl(&m, fc.grid(), &paths) {
        Err(Error::UndefinedMetric(_)) => {
            let mut total = 0.0;
            for (q, path) in fc.grid().as_slice().iter().zip(&paths) {
                total += actual.iter().zip(path).map(|(y, f)| pinball(*y, *f, *q)).sum::<f64>() / actual.len() as f64;
            }
            Ok(total / paths.len() as f64)
        }
        r => r,
    }
}

/// Scores every candidate pool on the validation window before the first
/// test window, traces the lambda frontier and writes the chosen pools.
pub fn cmd_pool_select(cfg: &PipelineConfig) -> Result<String> {
    cfg.validate()?;
    let started = Instant::now();
    let mut panel = cfg.load_panel()?;
    if let Some(k) = cfg.forecast.strategy.features.avm_k {
        panel = with_aggregate_avm(&panel, k)?;
    }
    let first = cfg.windows(&panel)?[0].origin;
    let origin = first
        .checked_sub(cfg.horizon)
        .filter(|o| *o > cfg.forecast.strategy.features.warmup() + cfg.horizon)
        .ok_or_else(|| Error::data("not enough history before the first window for a validation window"))?;
    let grid = cfg.grid()?;
    let factory = cfg.factory()?;
    let scfg = cfg.strategy_config();
    let meta = series_meta(&panel, origin);
    let p = &cfg.pooling;
    let unit = build_candidates(&meta, &p.families, 1.0, p.nu)?;
    let index: BTreeMap<&str, usize> = panel
        .series
        .iter()
        .enumerate()
        .map(|(i, s)| (s.series_id.as_str(), i))
        .collect();
    let n = panel.n_series();
    let mut losses = vec![vec![None; unit.len()]; n];
    for (g, cand) in unit.iter().enumerate() {
        let pool = Pool {
            id: cand.id.clone(),
            members: cand.members.clone(),
            active: true,
        };
        let fc = ctx(
            forecast_pool(factory.as_ref(), &panel, origin, cfg.horizon, &grid, &p.strategies, &pool, &scfg),
            || format!("candidate {}", cand.id),
        )?;
        for (m, id) in cand.members.iter().enumerate() {
            let i = index[id.as_str()];
            let y = &panel.series[i].target;
            losses[i][g] = Some(validation_loss(&y[..origin], &y[origin..origin + cfg.horizon], &fc, m)?);
        }
    }
    let baseline: Vec<f64> = (0..n)
        .map(|i| {
            let single = format!("single:{}", panel.series[i].series_id);
            let g = unit.iter().position(|c| c.id == single).expect("singletons are always candidates");
            losses[i][g].expect("singleton loss is filled")
        })
        .collect();
    let table = PoolLossTable {
        series_ids: panel.series.iter().map(|s| s.series_id.clone()).collect(),
        baseline,
        losses,
    };
    let s = match p.scale {
        Some(s) => s,
        None => calibrate_scale(&table, &unit, p.nu).unwrap_or(1.0),
    };
    let candidates = build_candidates(&meta, &p.families, s, p.nu)?;
    let lambdas = p.lambda.map(|l| vec![l]).unwrap_or_else(|| p.lambdas.clone());
    let frontier = lambda_frontier(&table, &candidates, &lambdas)?;
    let chosen = if p.lambda.is_some() { 0 } else { elbow_index(&frontier) };
    let dir = cfg.output_dir.join("pooling");

    let mut w = csv::Writer::from_writer(create_file(&dir.join("candidates.csv"))?);
    w.write_record(["id", "members", "model_count", "gini", "cost"])?;
    for c in &candidates {
        w.write_record([
            c.id.clone(),
            c.members.len().to_string(),
            c.model_count.to_string(),
            c.gini.to_string(),
            c.cost.to_string(),
        ])?;
    }
    w.flush()?;
    write_losses(&dir.join("losses.csv"), &table, &candidates)?;
    let mut w = csv::Writer::from_writer(create_file(&dir.join("frontier.csv"))?);
    w.write_record(["lambda", "mean_relative_loss", "pools_opened", "open_cost", "objective", "open_ids"])?;
    for f in &frontier {
        w.write_record([
            f.lambda.to_string(),
            f.mean_relative_loss.to_string(),
            f.pools_opened.to_string(),
            f.open_cost.to_string(),
            f.objective.to_string(),
            f.open_ids.join(";"),
        ])?;
    }
    w.flush()?;
    let open = &frontier[chosen].open_ids;
    let assignment = PoolAssignment {
        pools: candidates
            .iter()
            .filter(|c| open.contains(&c.id))
            .map(|c| Pool {
                id: c.id.clone(),
                members: c.members.clone(),
                active: true,
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&assignment)?;
    json.push('\n');
    fs::write(dir.join("pools.json"), json).map_err(Error::Io)?;
    write_timings(&cfg.output_dir, "pool-select", &[("total".into(), started.elapsed().as_secs_f64())])?;

    let mut out = format!("{:>8} {:>12} {:>6}\n", "lambda", "rel_loss", "pools");
    for (k, f) in frontier.iter().enumerate() {
        let mark = if k == chosen { " *" } else { "" };
        let _ = writeln!(out, "{:>8.3} {:>12.3} {:>6}{mark}", f.lambda, f.mean_relative_loss, f.pools_opened);
    }
    let _ = writeln!(out, "chose lambda {} with {} pools (cost scale {s:.3e})", frontier[chosen].lambda, open.len());
    Ok(out)
}

fn write_losses(path: &Path, table: &PoolLossTable, candidates: &[PoolCandidate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record(["series_id", "pool", "loss", "baseline"])?;
    for (i, row) in table.losses.iter().enumerate() {
        for (g, l) in row.iter().enumerate() {
            if let Some(l) = l {
                w.write_record([
                    table.series_ids[i].clone(),
                    candidates[g].id.clone(),
                    l.to_string(),
                    table.baseline[i].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Point values `[series][step]` with their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PointForecast {
    pub series_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl PointForecast {
    pub fn from_median(fc: &QuantileGridForecast) -> Self {
        Self {
            series_ids: fc.series_ids().to_vec(),
            values: (0..fc.series_ids().len()).map(|i| fc.median_path(i)).collect(),
        }
    }

    /// From per-step full vectors.
    pub fn from_steps(series_ids: Vec<String>, steps: &[Vec<f64>]) -> Self {
        let values = (0..series_ids.len())
            .map(|i| steps.iter().map(|v| v[i]).collect())
            .collect();
        Self { series_ids, values }
    }

    pub fn step(&self, h: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[h]).collect()
    }

    pub fn horizon(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["series_id", "step", "value"])?;
        for (id, path) in self.series_ids.iter().zip(&self.values) {
            for (h, v) in path.iter().enumerate() {
                w.write_record([id.clone(), (h + 1).to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut series_ids: Vec<String> = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::data("point forecast rows need series_id, step, value"));
            }
            let step: usize = rec[1].parse().map_err(|_| Error::data(format!("bad step {:?}", &rec[1])))?;
            let v: f64 = rec[2].parse().map_err(|_| Error::data(format!("bad value {:?}", &rec[2])))?;
            if series_ids.last().map(String::as_str) != Some(&rec[0]) {
                series_ids.push(rec[0].to_string());
                values.push(Vec::new());
            }
            let path = values.last_mut().expect("just pushed");
            if step != path.len() + 1 {
                return Err(Error::data(format!("steps out of order for {}", &rec[0])));
            }
            path.push(v);
        }
        let h = values.first().map_or(0, Vec::len);
        if h == 0 || values.iter().any(|v| v.len() != h) {
            return Err(Error::data("point forecast file is not a full series x step grid"));
        }
        Ok(Self { series_ids, values })
    }
}

/// One-step naive errors over the training range, rows = time.
fn naive_errors(panel: &Panel, end: usize) -> Vec<Vec<f64>> {
    (1..end)
        .map(|t| panel.series.iter().map(|s| s.target[t] - s.target[t - 1]).collect())
        .collect()
}

/// Per-series WMAPE of the one-step naive forecast over the trailing months.
fn naive_wmape(panel: &Panel, end: usize, months: usize) -> Vec<f64> {
    let start = end.saturating_sub(months).max(1);
    panel
        .series
        .iter()
        .map(|s| {
            let num: f64 = (start..end).map(|t| (s.target[t] - s.target[t - 1]).abs()).sum();
            let den: f64 = (start..end).map(|t| s.target[t].abs()).sum();
            if den > 0.0 {
                num / den
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

struct MethodOutcome {
    steps: Vec<Vec<f64>>,
    nodes: Option<usize>,
}

fn reconcile_one(
    method: &str,
    s: &SummingMatrix,
    base: &[Vec<f64>],
    cov: &CovarianceSpec,
    weights: &ReconWeights,
) -> Result<MethodOutcome> {
    let each = |f: &dyn Fn(&[f64]) -> Result<Vec<f64>>| -> Result<Vec<Vec<f64>>> { base.iter().map(|b| f(b)).collect() };
    let round = |steps: Vec<Vec<f64>>| -> Result<Vec<Vec<f64>>> {
        steps.iter().map(|v| Ok(round_posthoc(s, v)?.values)).collect()
    };
    let steps = match method {
        "bu" => each(&|b| reconcile_bu(s, b))?,
        "bu+round" => round(each(&|b| reconcile_bu(s, b))?)?,
        "ols" => each(&|b| reconcile_ols(s, b))?,
        "mint" => each(&|b| reconcile_mint(s, b, cov))?,
        "mint+round" => round(each(&|b| reconcile_mint(s, b, cov))?)?,
        "rec-milp" | "rec-milp-lw" => {
            let r = reconcile_milp(s, base, weights, method == "rec-milp-lw", &MilpOptions::default())?;
            return Ok(MethodOutcome {
                steps: r.values,
                nodes: Some(r.node_count),
            });
        }
        other => return Err(Error::Config(format!("unknown reconciliation method {other:?}"))),
    };
    Ok(MethodOutcome { steps, nodes: None })
}

/// Aggregate rows per level whose value differs from the sum of their
/// bottom descendants by more than `tol` (relative to the row's scale).
fn violations_by_level(s: &SummingMatrix, steps: &[Vec<f64>], tol: f64) -> Result<(Vec<usize>, f64)> {
    let mut counts = vec![0usize; s.n_levels()];
    let mut worst = 0.0_f64;
    for v in steps {
        let bottom = s.bottom_slice(v)?;
        for row in 0..s.n_series() {
            let implied: f64 = s.descendants(row).iter().map(|&j| bottom[j]).sum();
            let gap = (v[row] - implied).abs();
            worst = worst.max(gap);
            if gap > tol * implied.abs().max(1.0) {
                counts[s.row_levels()[row]] += 1;
            }
        }
    }
    Ok((counts, worst))
}

/// Reconciles the base method's median paths in every window.
pub fn cmd_reconcile(cfg: &PipelineConfig) -> Result<String> {
    cfg.validate()?;
    let started = Instant::now();
    let panel = cfg.load_panel()?;
    let windows = cfg.windows(&panel)?;
    let s = &panel.summing;
    let n_levels = s.n_levels();
    let names = &panel.hierarchy.levels;
    let mut timings = Vec::new();
    let mut report: Vec<Vec<String>> = Vec::new();
    let mut totals: BTreeMap<&str, (usize, Vec<(usize, f64)>)> = BTreeMap::new();
    for (w, win) in windows.iter().enumerate() {
        let path = forecast_path(&cfg.output_dir, w, &cfg.reconcile.base);
        let fc = ctx(QuantileGridForecast::read_csv(open_file(&path)?), || path.display().to_string())?;
        if fc.series_ids() != s.row_ids() || fc.horizon() != cfg.horizon {
            return Err(Error::data(format!("{} does not match the panel", path.display())));
        }
        let point = PointForecast::from_median(&fc);
        let base: Vec<Vec<f64>> = (0..cfg.horizon).map(|h| point.step(h)).collect();
        let cov = estimate_covariance(&naive_errors(&panel, win.origin), cfg.reconcile.shrink_lambda)?;
        let alpha = {
            let upper = (1.0 - cfg.reconcile.alpha_bottom) / (n_levels.max(2) - 1) as f64;
            let mut a = vec![upper; n_levels];
            a[n_levels - 1] = if n_levels == 1 { 1.0 } else { cfg.reconcile.alpha_bottom };
            a
        };
        let weights = ReconWeights {
            gamma: gamma_from_validation(&naive_wmape(&panel, win.origin, cfg.reconcile.gamma_months)),
            alpha: Some(alpha),
        };
        for method in &cfg.reconcile.methods {
            let t0 = Instant::now();
            let out = ctx(reconcile_one(method, s, &base, &cov, &weights), || {
                format!("window {w}, method {method}")
            })?;
            timings.push((format!("w{w}/{method}"), t0.elapsed().as_secs_f64()));
            let recon = PointForecast::from_steps(s.row_ids().to_vec(), &out.steps);
            recon.write_csv(create_file(&reconciled_path(&cfg.output_dir, w, method))?)?;
            let (counts, worst) = violations_by_level(s, &out.steps, 1e-7)?;
            let mut rm: Vec<(usize, f64)> = Vec::new();
            for (i, ser) in panel.series.iter().enumerate() {
                let m = MetricInput::new(&ser.target[..win.origin], &ser.target[win.test.clone()])?;
                if let Ok(v) = rmsse(&m, &recon.values[i]) {
                    rm.push((panel.level_of(i), v));
                }
            }
            let means = level_means(&rm, n_levels);
            let entry = totals.entry(method.as_str()).or_default();
            entry.0 += counts.iter().sum::<usize>();
            entry.1.extend(rm);
            for level in 0..n_levels {
                report.push(vec![
                    w.to_string(),
                    method.clone(),
                    names[level].clone(),
                    opt_cell(means[level]),
                    counts[level].to_string(),
                    worst.to_string(),
                    out.nodes.map(|n| n.to_string()).unwrap_or_default(),
                ]);
            }
        }
    }
    let mut wtr = csv::Writer::from_writer(create_file(&cfg.output_dir.join("reconcile_report.csv"))?);
    wtr.write_record(["window", "method", "level", "rmsse", "coherence_violations", "max_violation", "milp_nodes"])?;
    for row in report {
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    timings.push(("total".into(), started.elapsed().as_secs_f64()));
    write_timings(&cfg.output_dir, "reconcile", &timings)?;
    let mut out = format!("{:<12} {:>10} {:>12}\n", "method", "violations", "bottom RMSSE");
    for method in &cfg.reconcile.methods {
        let (v, rm) = &totals[method.as_str()];
        let bottom = level_means(rm, n_levels)[n_levels - 1];
        let _ = writeln!(out, "{:<12} {:>10} {:>12}", method, v, fmt3(bottom));
    }
    Ok(out)
}

fn load_points(cfg: &PipelineConfig, window: usize, method: &str) -> Result<PointForecast> {
    let fpath = forecast_path(&cfg.output_dir, window, method);
    if fpath.exists() {
        return Ok(PointForecast::from_median(&QuantileGridForecast::read_csv(open_file(&fpath)?)?));
    }
    let rpath = reconciled_path(&cfg.output_dir, window, method);
    if rpath.exists() {
        return PointForecast::read_csv(open_file(&rpath)?);
    }
    Err(Error::data(format!(
        "no forecast or reconciled output for {method:?} in window {window}"
    )))
}

/// Paired Wilcoxon / Hodges-Lehmann comparison of absolute errors per level.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<String> {
    let panel = cfg.load_panel()?;
    let windows = cfg.windows(&panel)?;
    let names = &panel.hierarchy.levels;
    let n_levels = panel.summing.n_levels();
    let mut rows: Vec<ComparisonRow> = Vec::new();
    let mut out = String::new();
    for (a, b) in &cfg.evaluate.pairs {
        let mut ae_a = vec![Vec::new(); n_levels];
        let mut ae_b = vec![Vec::new(); n_levels];
        for (w, win) in windows.iter().enumerate() {
            let pa = load_points(cfg, w, a)?;
            let pb = load_points(cfg, w, b)?;
            let row_ids = panel.summing.row_ids();
            if pa.series_ids != row_ids || pb.series_ids != row_ids || pa.horizon() != win.test.len() || pb.horizon() != win.test.len() {
                return Err(Error::data(format!("outputs for {a} and {b} in window {w} are misaligned")));
            }
            for (i, s) in panel.series.iter().enumerate() {
                let level = panel.level_of(i);
                for (h, t) in win.test.clone().enumerate() {
                    ae_a[level].push((s.target[t] - pa.values[i][h]).abs());
                    ae_b[level].push((s.target[t] - pb.values[i][h]).abs());
                }
            }
        }
        for level in 0..n_levels {
            match compare_methods(&names[level], a, b, &ae_a[level], &ae_b[level], cfg.evaluate.alternative.into())? {
                Some(row) => {
                    let _ = writeln!(
                        out,
                        "{:<10} vs {:<10} {:<16} N_r={:<6} V={:<10} p={:.3} r_rb={:.3} HL={:.3}",
                        a, b, row.level, row.n_r, row.v, row.p_value, row.rank_biserial, row.hl
                    );
                    rows.push(row);
                }
                None => {
                    let _ = writeln!(out, "{a} vs {b} at {}: all differences are zero, test skipped", names[level]);
                }
            }
        }
    }
    let mut w = csv::Writer::from_writer(create_file(&cfg.output_dir.join("evaluation.csv"))?);
    w.write_record(COMPARISON_COLUMNS)?;
    for r in &rows {
        w.write_record([
            r.level.clone(),
            r.method_a.clone(),
            r.method_b.clone(),
            r.n_r.to_string(),
            r.v.to_string(),
            r.p_value.to_string(),
            r.rank_biserial.to_string(),
            r.hl.to_string(),
            r.mean_diff.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(out)
}

/// The two-leaf example: summing matrix (rows top, b1, b2), base forecast
/// and the shrunk covariance used for MinT.
pub fn geometry_example() -> Result<(SummingMatrix, Vec<f64>, CovarianceSpec)> {
    let spec = HierarchySpec::from_key_paths(&["item"], &[vec!["b1".to_string()], vec!["b2".to_string()]])?;
    let s = build_summing_matrix(&spec)?;
    // covariance listed in (b1, b2, top) order
    let listed = [[4.0, 1.8, 5.8], [1.8, 9.0, 10.8], [5.8, 10.8, 16.6]];
    let order = [2, 0, 1];
    let cov = CovarianceSpec::new(DMatrix::from_fn(3, 3, |i, j| listed[order[i]][order[j]]), 0.3);
    Ok((s, vec![8.7, 1.5, 5.6], cov))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryLine {
    pub method: String,
    /// `(b1, b2, top)`.
    pub values: [f64; 3],
    pub expected: [f64; 3],
    pub pass: bool,
}

/// Runs OLS, MinT and REC-MILP on the two-leaf example.
pub fn cmd_geometry_demo() -> Result<Vec<GeometryLine>> {
    let (s, base, cov) = geometry_example()?;
    let reorder = |v: &[f64]| [v[1], v[2], v[0]];
    let ols = reconcile_ols(&s, &base)?;
    let mint = reconcile_mint(&s, &base, &cov)?;
    let milp = reconcile_milp(&s, std::slice::from_ref(&base), &ReconWeights::uniform(3), false, &MilpOptions::default())?;
    let lines = [
        ("OLS", reorder(&ols), [2.033, 6.133, 8.167], 1e-3),
        ("MinT", reorder(&mint), [1.716, 6.086, 7.803], 1e-3),
        ("REC-MILP", reorder(&milp.values[0]), [2.0, 6.0, 8.0], 0.0),
    ];
    lines
        .into_iter()
        .map(|(method, values, expected, tol)| {
            let full = [values[2], values[0], values[1]];
            let coherent = check_coherence(&s, &full, 1e-9)?.coherent;
            Ok(GeometryLine {
                method: method.into(),
                values,
                expected,
                pass: coherent && values.iter().zip(&expected).all(|(v, e)| (v - e).abs() <= tol),
            })
        })
        .collect()
}

pub fn format_geometry(lines: &[GeometryLine]) -> String {
    let mut out = String::from("base (b1, b2, top) = (1.500, 5.600, 8.700)\n");
    for l in lines {
        let _ = writeln!(
            out,
            "{:<9} ({:.3}, {:.3}, {:.3})  expected ({:.3}, {:.3}, {:.3})  {}",
            l.method,
            l.values[0],
            l.values[1],
            l.values[2],
            l.expected[0],
            l.expected[1],
            l.expected[2],
            if l.pass { "PASS" } else { "FAIL" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_demo_passes() {
        let lines = cmd_geometry_demo().unwrap();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.pass), "{}", format_geometry(&lines));
        assert_eq!(lines[2].values, [2.0, 6.0, 8.0]);
    }

    #[test]
    fn config_defaults_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        let partial = PipelineConfig::from_toml("horizon = 2\n[forecast]\nmethods = [\"ma3\"]\n").unwrap();
        assert_eq!(partial.horizon, 2);
        assert_eq!(partial.windows, 3);
    }

    #[test]
    fn config_rejections() {
        for bad in [
            "horizon = 0",
            "[forecast]\nmethods = [\"arima\"]",
            "[forecast]\nlearner = \"xgb\"",
            "[reconcile]\nmethods = [\"td\"]",
            "quantiles = [0.5, 0.4]",
            "unknown_key = 1",
        ] {
            let err = PipelineConfig::from_toml(bad).unwrap_err();
            assert_eq!(err.kind(), crate::error::ErrorKind::Usage, "{bad}: {err}");
        }
    }

    #[test]
    fn point_csv_round_trip() {
        let p = PointForecast {
            series_ids: vec!["total".into(), "a".into()],
            values: vec![vec![3.0, 4.5], vec![1.0 / 3.0, 0.0]],
        };
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(PointForecast::read_csv(&buf[..]).unwrap(), p);
    }

    #[test]
    fn violation_counts() {
        let (s, _, _) = geometry_example().unwrap();
        let (counts, worst) = violations_by_level(&s, &[vec![3.0, 2.0, 2.0], vec![4.0, 2.0, 2.0]], 0.0).unwrap();
        assert_eq!(counts, vec![1, 0]);
        assert_eq!(worst, 1.0);
    }
}
