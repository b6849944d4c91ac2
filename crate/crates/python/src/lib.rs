//! Python bindings for `hiercast`.

use std::path::PathBuf;

use hiercast::evalstats::{hodges_lehmann as hl, wilcoxon_signed_rank, Alternative, PairedDiffs};
use hiercast::metrics::{self, MetricInput};
use hiercast::panel::{generate_synthetic, load_panel, PanelSchema, SyntheticConfig};
use hiercast::pipeline::{self, PipelineConfig};
use hiercast::pooling::{self as pool, PoolCandidate, PoolLossTable};
use hiercast::reconcile::{self as rec, CovarianceSpec, MilpBackend, MilpOptions, ReconWeights};
use hiercast::{build_summing_matrix, check_coherence, ErrorKind, HierarchySpec, QuantileGrid};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: hiercast::Error) -> PyErr {
    match e.kind() {
        ErrorKind::Solver => PyRuntimeError::new_err(e.to_string()),
        ErrorKind::Usage | ErrorKind::Data => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for hiercast::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Summing matrix of a hierarchy; rows are level-major with `total` first.
#[pyclass(frozen, module = "hiercast_py")]
struct SummingMatrix {
    inner: hiercast::SummingMatrix,
}

#[pymethods]
impl SummingMatrix {
    /// `levels` names the levels below the root; each key path lists one
    /// bottom series from the top level down.
    #[new]
    fn new(levels: Vec<String>, key_paths: Vec<Vec<String>>) -> PyResult<Self> {
        let spec = HierarchySpec::from_key_paths(&levels, &key_paths).py()?;
        Ok(Self {
            inner: build_summing_matrix(&spec).py()?,
        })
    }

    #[getter]
    fn series_ids(&self) -> Vec<String> {
        self.inner.row_ids().to_vec()
    }

    #[getter]
    fn bottom_ids(&self) -> Vec<String> {
        self.inner.col_ids().to_vec()
    }

    #[getter]
    fn n_series(&self) -> usize {
        self.inner.n_series()
    }

    #[getter]
    fn n_bottom(&self) -> usize {
        self.inner.n_bottom()
    }

    fn to_dense(&self) -> Vec<Vec<f64>> {
        let m = self.inner.entries();
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    }

    fn aggregate(&self, bottom: Vec<f64>) -> PyResult<Vec<f64>> {
        hiercast::aggregate_bottom(&self.inner, &bottom).py()
    }

    /// `(coherent, max_violation)`.
    #[pyo3(signature = (values, tol = 1e-7))]
    fn check_coherence(&self, values: Vec<f64>, tol: f64) -> PyResult<(bool, f64)> {
        let r = check_coherence(&self.inner, &values, tol).py()?;
        Ok((r.coherent, r.max_violation))
    }

    fn __repr__(&self) -> String {
        format!("SummingMatrix(n_series={}, n_bottom={})", self.inner.n_series(), self.inner.n_bottom())
    }
}

/// Monthly hierarchical panel.
#[pyclass(frozen, module = "hiercast_py")]
struct Panel {
    inner: hiercast::Panel,
}

#[pymethods]
impl Panel {
    #[staticmethod]
    #[pyo3(signature = (markets = 3, clusters = 2, months = 72, seed = 7))]
    fn synthetic(markets: usize, clusters: usize, months: usize, seed: u64) -> PyResult<Self> {
        let cfg = SyntheticConfig {
            markets,
            clusters,
            months,
            seed,
            ..SyntheticConfig::default()
        };
        Ok(Self {
            inner: generate_synthetic(&cfg).py()?,
        })
    }

    /// Long-format CSV with the default column names.
    #[staticmethod]
    fn from_csv(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_panel(path, &PanelSchema::default()).py()?,
        })
    }

    #[getter]
    fn series_ids(&self) -> Vec<String> {
        self.inner.series.iter().map(|s| s.series_id.clone()).collect()
    }

    #[getter]
    fn levels(&self) -> Vec<String> {
        self.inner.hierarchy.levels.clone()
    }

    #[getter]
    fn months(&self) -> Vec<String> {
        self.inner.timestamps().iter().map(|m| m.to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn target(&self, series_id: &str) -> PyResult<Vec<f64>> {
        self.inner
            .series
            .iter()
            .find(|s| s.series_id == series_id)
            .map(|s| s.target.clone())
            .ok_or_else(|| PyValueError::new_err(format!("unknown series {series_id}")))
    }

    fn summing_matrix(&self) -> SummingMatrix {
        SummingMatrix {
            inner: self.inner.summing.clone(),
        }
    }
}

#[pyfunction]
fn reconcile_bu(s: &SummingMatrix, base: Vec<f64>) -> PyResult<Vec<f64>> {
    rec::reconcile_bu(&s.inner, &base).py()
}

#[pyfunction]
fn reconcile_ols(s: &SummingMatrix, base: Vec<f64>) -> PyResult<Vec<f64>> {
    rec::reconcile_ols(&s.inner, &base).py()
}

/// MinT with the covariance shrunk toward its diagonal by `shrink_lambda`.
#[pyfunction]
#[pyo3(signature = (s, base, sigma, shrink_lambda = 0.3))]
fn reconcile_mint(s: &SummingMatrix, base: Vec<f64>, sigma: Vec<Vec<f64>>, shrink_lambda: f64) -> PyResult<Vec<f64>> {
    let n = sigma.len();
    if sigma.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("sigma must be square"));
    }
    let cov = CovarianceSpec::new(DMatrix::from_fn(n, n, |i, j| sigma[i][j]), shrink_lambda);
    rec::reconcile_mint(&s.inner, &base, &cov).py()
}

/// Integer coherent reconciliation. `base` holds one full vector per step.
#[pyfunction]
#[pyo3(signature = (s, base, gamma = None, backend = "auto"))]
fn reconcile_milp<'py>(
    py: Python<'py>,
    s: &SummingMatrix,
    base: Vec<Vec<f64>>,
    gamma: Option<Vec<f64>>,
    backend: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let backend = match backend {
        "auto" => MilpBackend::Auto,
        "tree_dp" => MilpBackend::TreeDp,
        "branch_and_bound" => MilpBackend::BranchAndBound,
        other => return Err(PyValueError::new_err(format!("unknown backend {other}"))),
    };
    let weights = match gamma {
        Some(gamma) => ReconWeights { gamma, alpha: None },
        None => ReconWeights::uniform(s.inner.n_series()),
    };
    let opts = MilpOptions {
        backend,
        ..Default::default()
    };
    let r = rec::reconcile_milp(&s.inner, &base, &weights, false, &opts).py()?;
    let out = PyDict::new(py);
    out.set_item("values", r.values)?;
    out.set_item("objective", r.objective)?;
    out.set_item("step_objectives", r.step_objectives)?;
    out.set_item("node_count", r.node_count)?;
    Ok(out)
}

#[pyfunction]
fn spl(insample: Vec<f64>, actual: Vec<f64>, q: f64, forecast: Vec<f64>) -> PyResult<f64> {
    metrics::spl(&MetricInput::new(&insample, &actual).py()?, q, &forecast).py()
}

/// `paths[k]` is the forecast path for `quantiles[k]`.
#[pyfunction]
fn mspl(insample: Vec<f64>, actual: Vec<f64>, quantiles: Vec<f64>, paths: Vec<Vec<f64>>) -> PyResult<f64> {
    let grid = QuantileGrid::new(quantiles).py()?;
    metrics::mspl(&MetricInput::new(&insample, &actual).py()?, &grid, &paths).py()
}

#[pyfunction]
fn rmsse(insample: Vec<f64>, actual: Vec<f64>, forecast: Vec<f64>) -> PyResult<f64> {
    metrics::rmsse(&MetricInput::new(&insample, &actual).py()?, &forecast).py()
}

#[pyfunction]
fn wmape(insample: Vec<f64>, actual: Vec<f64>, forecast: Vec<f64>) -> PyResult<f64> {
    metrics::wmape(&MetricInput::new(&insample, &actual).py()?, &forecast).py()
}

/// Paired signed-rank test on differences; zeros are dropped.
#[pyfunction]
#[pyo3(signature = (diffs, alternative = "less"))]
fn wilcoxon<'py>(py: Python<'py>, diffs: Vec<f64>, alternative: &str) -> PyResult<Bound<'py, PyDict>> {
    let alt = match alternative {
        "less" => Alternative::Less,
        "greater" => Alternative::Greater,
        "two-sided" | "two_sided" => Alternative::TwoSided,
        other => return Err(PyValueError::new_err(format!("unknown alternative {other}"))),
    };
    let r = wilcoxon_signed_rank(&PairedDiffs::new(&diffs).py()?, alt).py()?;
    let out = PyDict::new(py);
    out.set_item("n_r", r.n_r)?;
    out.set_item("v", r.v)?;
    out.set_item("p_value", r.p_value)?;
    out.set_item("rank_biserial", r.rank_biserial)?;
    out.set_item("exact", r.exact)?;
    Ok(out)
}

#[pyfunction]
fn hodges_lehmann(diffs: Vec<f64>) -> PyResult<f64> {
    hl(&diffs).py()
}

/// Exact pool selection. `candidates` is a list of `(id, members, cost)`;
/// `losses[i][g]` is `None` when series i is not in candidate g.
/// Returns `(open_ids, assignment, objective)`.
#[pyfunction]
fn solve_pool_selection(
    series_ids: Vec<String>,
    baseline: Vec<f64>,
    losses: Vec<Vec<Option<f64>>>,
    candidates: Vec<(String, Vec<String>, f64)>,
    lam: f64,
) -> PyResult<(Vec<String>, Vec<usize>, f64)> {
    let candidates: Vec<PoolCandidate> = candidates
        .into_iter()
        .map(|(id, members, cost)| PoolCandidate {
            id,
            model_count: 1,
            gini: 0.0,
            cost,
            members,
        })
        .collect();
    let table = PoolLossTable {
        series_ids,
        baseline,
        losses,
    };
    let sel = pool::solve_pool_selection(&table, &candidates, lam).py()?;
    let open = sel.open_ids(&candidates).into_iter().map(str::to_string).collect();
    Ok((open, sel.assignment, sel.objective))
}

/// Pipeline configuration; TOML round-trips through `to_toml`.
#[pyclass(module = "hiercast_py")]
struct Config {
    inner: PipelineConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => PipelineConfig::from_toml(text).py()?,
            None => PipelineConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: PipelineConfig::load(path).py()?,
        })
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.inner.output_dir = dir;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().py()
    }

    fn simulate(&self, py: Python<'_>) -> PyResult<String> {
        py.detach(|| pipeline::cmd_simulate(&self.inner)).py()
    }

    fn forecast(&self, py: Python<'_>) -> PyResult<String> {
        py.detach(|| pipeline::cmd_forecast(&self.inner)).py()
    }

    fn pool_select(&self, py: Python<'_>) -> PyResult<String> {
        py.detach(|| pipeline::cmd_pool_select(&self.inner)).py()
    }

    fn reconcile(&self, py: Python<'_>) -> PyResult<String> {
        py.detach(|| pipeline::cmd_reconcile(&self.inner)).py()
    }

    fn evaluate(&self, py: Python<'_>) -> PyResult<String> {
        py.detach(|| pipeline::cmd_evaluate(&self.inner)).py()
    }
}

/// Two-leaf worked example: list of `(method, (b1, b2, top), pass)`.
#[pyfunction]
fn geometry_demo() -> PyResult<Vec<(String, (f64, f64, f64), bool)>> {
    Ok(pipeline::cmd_geometry_demo()
        .py()?
        .into_iter()
        .map(|l| (l.method, (l.values[0], l.values[1], l.values[2]), l.pass))
        .collect())
}

#[pymodule]
fn hiercast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<SummingMatrix>()?;
    m.add_class::<Panel>()?;
    m.add_class::<Config>()?;
    m.add_function(wrap_pyfunction!(reconcile_bu, m)?)?;
    m.add_function(wrap_pyfunction!(reconcile_ols, m)?)?;
    m.add_function(wrap_pyfunction!(reconcile_mint, m)?)?;
    m.add_function(wrap_pyfunction!(reconcile_milp, m)?)?;
    m.add_function(wrap_pyfunction!(spl, m)?)?;
    m.add_function(wrap_pyfunction!(mspl, m)?)?;
    m.add_function(wrap_pyfunction!(rmsse, m)?)?;
    m.add_function(wrap_pyfunction!(wmape, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(hodges_lehmann, m)?)?;
    m.add_function(wrap_pyfunction!(solve_pool_selection, m)?)?;
    m.add_function(wrap_pyfunction!(geometry_demo, m)?)?;
    Ok(())
}
