//! Python bindings: stream generation and ingestion, sequence runs, the
//! survival metrics and TopK-S gating.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use survcl::data::TaskStream;
use survcl::experiment::{run_experiment as run_exp, task_folds, ExperimentConfig};
use survcl::harness::{predict_risks, run_sequence as run_seq, Method, MethodConfig, RunResult};
use survcl::model::SurvivalModel;
use survcl::report::RunMetrics;
use survcl::synth::GeneratorConfig;

create_exception!(survcl_py, SurvclError, PyException);
create_exception!(survcl_py, ConfigError, SurvclError);
create_exception!(survcl_py, DataError, SurvclError);
create_exception!(survcl_py, UndefinedError, SurvclError);

fn to_py(e: survcl::Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        1 => ConfigError::new_err(msg),
        3 => UndefinedError::new_err(msg),
        _ => DataError::new_err(msg),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    ConfigError::new_err(e.to_string())
}

/// A sequence of survival tasks.
#[pyclass(module = "survcl_py", from_py_object)]
#[derive(Clone)]
pub struct Stream {
    inner: TaskStream,
}

#[pymethods]
impl Stream {
    #[getter]
    fn n_tasks(&self) -> usize {
        self.inner.n_tasks()
    }

    #[getter]
    fn patch_dim(&self) -> usize {
        self.inner.patch_dim()
    }

    #[getter]
    fn genomic_width(&self) -> usize {
        self.inner.genomic_width()
    }

    fn task_sizes(&self) -> Vec<usize> {
        self.inner.tasks.iter().map(|t| t.len()).collect()
    }

    fn bin_boundaries(&self, task: usize) -> PyResult<Vec<f64>> {
        let t = self.inner.tasks.get(task).ok_or_else(|| to_py(survcl::Error::UnknownTask(task)))?;
        Ok(t.bins.boundaries().to_vec())
    }

    /// `(times, censored)` of every case of `task`.
    fn outcomes(&self, task: usize) -> PyResult<(Vec<f64>, Vec<bool>)> {
        let t = self.inner.tasks.get(task).ok_or_else(|| to_py(survcl::Error::UnknownTask(task)))?;
        Ok((t.cases.iter().map(|c| c.time).collect(), t.cases.iter().map(|c| c.censored).collect()))
    }

    /// Writes feature-bag files and a manifest into `dir`.
    fn write(&self, dir: &str) -> PyResult<()> {
        survcl::io::write_stream(dir.as_ref(), &self.inner).map_err(to_py)
    }

    fn __eq__(&self, other: &Stream) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Stream(n_tasks={}, sizes={:?})", self.inner.n_tasks(), self.task_sizes())
    }
}

/// Generates a synthetic stream. `config` is a JSON object of generator
/// settings; omitted keys keep their defaults.
#[pyfunction]
#[pyo3(signature = (seed=0, config=None))]
fn generate_stream(seed: u64, config: Option<&str>) -> PyResult<Stream> {
    let mut cfg: GeneratorConfig = match config {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => GeneratorConfig::default(),
    };
    cfg.seed = seed;
    let s = survcl::synth::generate_stream(&cfg).map_err(to_py)?;
    Ok(Stream { inner: s.stream })
}

#[pyfunction]
fn ingest_feature_bags(dir: &str) -> PyResult<Stream> {
    Ok(Stream {
        inner: survcl::io::ingest_feature_bags(dir.as_ref()).map_err(to_py)?,
    })
}

/// Result of one method run over a stream.
#[pyclass(module = "survcl_py", skip_from_py_object)]
pub struct Run {
    result: RunResult,
    metrics: RunMetrics,
}

fn matrix(m: &survcl::harness::PerformanceMatrix) -> Vec<Vec<Option<f64>>> {
    m.rows.clone()
}

#[pymethods]
impl Run {
    /// Rows of the C-index matrix; row 0 is the untrained model.
    #[getter]
    fn c_index(&self) -> Vec<Vec<Option<f64>>> {
        matrix(&self.result.c_index)
    }

    #[getter]
    fn c_index_ipcw(&self) -> Vec<Vec<Option<f64>>> {
        matrix(&self.result.c_index_ipcw)
    }

    /// Average, Forget, BWT, FWT for both metrics, as a JSON string.
    fn metrics_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.metrics).map_err(json_err)
    }

    #[getter]
    fn average(&self) -> f64 {
        self.metrics.c_index.average
    }

    #[getter]
    fn forgetting(&self) -> Option<f64> {
        self.metrics.c_index.forget
    }

    /// `(task, site, expert, proportion)` rows; empty without expert layers.
    fn routing(&self) -> Vec<(usize, String, usize, f64)> {
        self.result
            .routing
            .iter()
            .map(|r| (r.task, r.site.as_str().to_string(), r.expert, r.proportion))
            .collect()
    }

    /// Risk score of every case of `task` under the final model.
    fn risks(&self, stream: &Stream, task: usize) -> PyResult<Vec<f64>> {
        let model: &SurvivalModel = &self.result.model;
        let t = stream.inner.tasks.get(task).ok_or_else(|| to_py(survcl::Error::UnknownTask(task)))?;
        let idx: Vec<usize> = (0..t.len()).collect();
        predict_risks(model, t, &idx, task).map_err(to_py)
    }
}

/// Runs `method` over `stream`, validating on fold `fold` of `n_folds`.
#[pyfunction]
#[pyo3(signature = (method, stream, seed=0, epochs=None, alpha=None, beta=None, use_moe=None, n_folds=5, fold=0))]
#[allow(clippy::too_many_arguments)]
fn run_sequence(
    method: &str,
    stream: &Stream,
    seed: u64,
    epochs: Option<usize>,
    alpha: Option<f64>,
    beta: Option<f64>,
    use_moe: Option<bool>,
    n_folds: usize,
    fold: usize,
) -> PyResult<Run> {
    let m: Method = method.parse().map_err(to_py)?;
    let mut cfg = MethodConfig::new(m);
    cfg.seed = seed;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(a) = alpha {
        cfg.loss.alpha = a;
    }
    if let Some(b) = beta {
        cfg.loss.beta = b;
    }
    if let Some(u) = use_moe {
        cfg.model.use_moe = u;
    }
    let folds = task_folds(&stream.inner, n_folds, fold, seed).map_err(to_py)?;
    let result = run_seq(&cfg, &stream.inner, &folds).map_err(to_py)?;
    let metrics = RunMetrics::new(m.as_str(), seed, &result.c_index, &result.c_index_ipcw).map_err(to_py)?;
    Ok(Run { result, metrics })
}

/// Runs a TOML experiment config; returns the aggregate report as JSON.
#[pyfunction]
fn run_experiment(config_path: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_file(config_path.as_ref()).map_err(to_py)?;
    let report = run_exp(&cfg).map_err(to_py)?;
    if let Some(f) = report.failures.into_iter().next() {
        return Err(to_py(f.error));
    }
    serde_json::to_string(&report.aggregate).map_err(json_err)
}

#[pyfunction]
fn c_index(risks: Vec<f64>, times: Vec<f64>, censored: Vec<bool>) -> PyResult<f64> {
    survcl::survival::c_index(&risks, &times, &censored).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (risks, times, censored, tau=None))]
fn c_index_ipcw(risks: Vec<f64>, times: Vec<f64>, censored: Vec<bool>, tau: Option<f64>) -> PyResult<f64> {
    let tau = match tau.or_else(|| survcl::survival::default_tau(&times, &censored)) {
        Some(t) => t,
        None => return Err(UndefinedError::new_err("no observed events")),
    };
    survcl::survival::c_index_ipcw(&risks, &times, &censored, tau).map_err(to_py)
}

/// `(time, survival, at_risk, events)` per distinct event time.
#[pyfunction]
fn km_estimator(times: Vec<f64>, events: Vec<bool>) -> PyResult<Vec<(f64, f64, usize, usize)>> {
    let km = survcl::survival::km_estimator(&times, &events).map_err(to_py)?;
    Ok(km.points.iter().map(|p| (p.time, p.survival, p.at_risk, p.events)).collect())
}

/// `(chi2, p_value)`.
#[pyfunction]
fn log_rank_test(times_a: Vec<f64>, events_a: Vec<bool>, times_b: Vec<f64>, events_b: Vec<bool>) -> PyResult<(f64, f64)> {
    let lr = survcl::survival::log_rank_test(&times_a, &events_a, &times_b, &events_b).map_err(to_py)?;
    Ok((lr.chi2, lr.p_value))
}

#[pyfunction]
#[pyo3(signature = (hazards, label, censored, alpha_s=0.0))]
fn nll_survival_loss(hazards: Vec<f64>, label: usize, censored: bool, alpha_s: f64) -> PyResult<f64> {
    let cfg = survcl::survival::SurvLossConfig { alpha_s };
    survcl::survival::nll_survival_loss(&hazards, label, censored, cfg).map_err(to_py)
}

/// `(selected, weights)` for the shared expert plus the top `k_top` others.
#[pyfunction]
fn topk_s_select(logits: Vec<f64>, k_top: usize, shared_idx: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let g = survcl::moe::topk_s_select(&logits, k_top, shared_idx).map_err(to_py)?;
    Ok((g.selected, g.weights))
}

#[pymodule]
fn survcl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("SurvclError", py.get_type::<SurvclError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("UndefinedError", py.get_type::<UndefinedError>())?;
    m.add_class::<Stream>()?;
    m.add_class::<Run>()?;
    m.add_function(wrap_pyfunction!(generate_stream, m)?)?;
    m.add_function(wrap_pyfunction!(ingest_feature_bags, m)?)?;
    m.add_function(wrap_pyfunction!(run_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(c_index, m)?)?;
    m.add_function(wrap_pyfunction!(c_index_ipcw, m)?)?;
    m.add_function(wrap_pyfunction!(km_estimator, m)?)?;
    m.add_function(wrap_pyfunction!(log_rank_test, m)?)?;
    m.add_function(wrap_pyfunction!(nll_survival_loss, m)?)?;
    m.add_function(wrap_pyfunction!(topk_s_select, m)?)?;
    Ok(())
}
