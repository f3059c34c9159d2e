//! Python bindings: configs, end-to-end runs, the mask and pooling kernels,
//! and schedule-only plans.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use rdi_core::config::ExperimentConfig;
use rdi_core::data::{build_schedule, IndexOnlyDataset};
use rdi_core::experiment::{average_accuracy, run_experiment as core_run};
use rdi_core::model::cosine_logits;
use rdi_core::protocol::session_plan as core_plan;
use rdi_core::rdi::{self, PoolingMode};
use rdi_core::types::{CosineClassifier, FeatureMap, MaskKind, PatchMask, PooledFeature};
use rdi_core::Error;

create_exception!(rdi_py, RdiError, PyException);
create_exception!(rdi_py, ConfigError, RdiError);
create_exception!(rdi_py, DivergenceError, RdiError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::ConfigParse(_) | Error::SyntheticSpec(_) => ConfigError::new_err(e.to_string()),
        Error::Divergence { .. } => DivergenceError::new_err(e.to_string()),
        _ => RdiError::new_err(e.to_string()),
    }
}

/// Experiment configuration with every default filled in.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: ExperimentConfig::default(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_toml_str(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn run_id(&self) -> String {
        self.inner.run_id()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[setter]
    fn set_name(&mut self, v: String) {
        self.inner.name = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.rdi.lambda
    }

    #[setter]
    fn set_lambda_(&mut self, v: f64) {
        self.inner.rdi.lambda = v;
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.rdi.beta
    }

    #[setter]
    fn set_beta(&mut self, v: f64) {
        self.inner.rdi.beta = v;
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.rdi.threshold
    }

    #[setter]
    fn set_threshold(&mut self, v: f64) {
        self.inner.rdi.threshold = v;
    }

    #[getter]
    fn base_epochs(&self) -> usize {
        self.inner.protocol.base_epochs
    }

    #[setter]
    fn set_base_epochs(&mut self, v: usize) {
        self.inner.protocol.base_epochs = v;
    }

    #[getter]
    fn rdi_epochs(&self) -> usize {
        self.inner.protocol.rdi_epochs
    }

    #[setter]
    fn set_rdi_epochs(&mut self, v: usize) {
        self.inner.protocol.rdi_epochs = v;
    }

    fn __repr__(&self) -> String {
        format!("Config(run_id={:?})", self.inner.run_id())
    }
}

/// `height x width` grid of `channels`-dim patch features.
#[pyclass(name = "FeatureMap")]
struct PyFeatureMap {
    inner: FeatureMap,
}

#[pymethods]
impl PyFeatureMap {
    /// `values` is row-major, channels innermost.
    #[new]
    fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: FeatureMap::new(height, width, channels, values).map_err(to_py)?,
        })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    fn global_pool(&self) -> Vec<f64> {
        rdi_core::model::global_pool(&self.inner).vector
    }
}

/// Cosine classifier; a trailing dummy column is marked with `with_dummy`.
#[pyclass(name = "Classifier")]
struct PyClassifier {
    inner: CosineClassifier,
}

#[pymethods]
impl PyClassifier {
    #[new]
    #[pyo3(signature = (columns, temperature = 16.0))]
    fn new(columns: Vec<Vec<f64>>, temperature: f64) -> PyResult<Self> {
        Ok(Self {
            inner: CosineClassifier::from_columns(&columns, temperature).map_err(to_py)?,
        })
    }

    /// Copy extended with a seeded unit-norm dummy column.
    fn with_dummy(&self, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: rdi::extend_with_dummy(&self.inner, seed).map_err(to_py)?,
        })
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn real_classes(&self) -> usize {
        self.inner.real_classes()
    }

    fn logits(&self, feature: Vec<f64>) -> PyResult<Vec<f64>> {
        cosine_logits(&self.inner, &PooledFeature::raw(feature)).map_err(to_py)
    }

    /// Predicted base class of a feature map (global pooling, dummy excluded).
    fn predict_map(&self, map: &PyFeatureMap) -> PyResult<usize> {
        rdi::predicted_label(&self.inner.without_dummy(), &map.inner).map_err(to_py)
    }
}

/// Binary patch mask, ALR or ALI.
#[pyclass(name = "PatchMask")]
struct PyPatchMask {
    inner: PatchMask,
}

#[pymethods]
impl PyPatchMask {
    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.kind() {
            MaskKind::Alr => "ALR",
            MaskKind::Ali => "ALI",
        }
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.height(), self.inner.width())
    }

    #[getter]
    fn bits(&self) -> Vec<bool> {
        self.inner.bits().to_vec()
    }

    fn support(&self) -> usize {
        self.inner.support()
    }

    fn complement(&self) -> Self {
        Self {
            inner: self.inner.complement(),
        }
    }
}

#[pyfunction]
fn alr_mask(map: &PyFeatureMap, classifier: &PyClassifier, predicted: usize, threshold: f64) -> PyResult<PyPatchMask> {
    Ok(PyPatchMask {
        inner: rdi::alr_mask(&map.inner, &classifier.inner, predicted, threshold).map_err(to_py)?,
    })
}

#[pyfunction]
fn ali_mask(alr: &PyPatchMask) -> PyResult<PyPatchMask> {
    Ok(PyPatchMask {
        inner: rdi::ali_mask(&alr.inner).map_err(to_py)?,
    })
}

/// `mode` is "masked_mean" (divide by support) or "global_mean" (divide by h*w).
#[pyfunction]
#[pyo3(signature = (map, mask, mode = "masked_mean"))]
fn masked_pool(map: &PyFeatureMap, mask: &PyPatchMask, mode: &str) -> PyResult<Vec<f64>> {
    let mode = match mode {
        "masked_mean" => PoolingMode::MaskedMean,
        "global_mean" => PoolingMode::GlobalMean,
        other => return Err(PyValueError::new_err(format!("unknown pooling mode {other:?}"))),
    };
    Ok(rdi::masked_pool(&map.inner, &mask.inner, mode).map_err(to_py)?.vector)
}

/// Batch-mean total loss over feature maps; `classifier` must carry the dummy
/// column when either extra term is active.
#[pyfunction]
fn total_loss(
    maps: Vec<PyRef<'_, PyFeatureMap>>,
    labels: Vec<usize>,
    classifier: &PyClassifier,
    config: &PyConfig,
) -> PyResult<f64> {
    let maps: Vec<FeatureMap> = maps.iter().map(|m| m.inner.clone()).collect();
    rdi::total_loss_from_maps(&maps, &labels, &classifier.inner, &config.inner.rdi).map_err(to_py)
}

/// Result of an end-to-end run.
#[pyclass(name = "RunResult")]
struct PyRunResult {
    #[pyo3(get)]
    dir: PathBuf,
    #[pyo3(get)]
    average_accuracy: f64,
    /// `(session, top1, ba, na, aa, nn, gap)` per session.
    #[pyo3(get)]
    sessions: Vec<(usize, f64, f64, Option<f64>, f64, Option<f64>, Option<f64>)>,
}

/// Trains and evaluates `config`, writing the run directory under `run_root`.
#[pyfunction]
#[pyo3(signature = (config, run_root = None))]
fn run_experiment(py: Python<'_>, config: &PyConfig, run_root: Option<PathBuf>) -> PyResult<PyRunResult> {
    let root = run_root.unwrap_or_else(rdi_core::experiment::default_run_root);
    let cfg = config.inner.clone();
    let out = py.detach(|| core_run(&cfg, &root)).map_err(to_py)?;
    let reports = out.experiment.reports();
    Ok(PyRunResult {
        dir: out.dir.clone(),
        average_accuracy: average_accuracy(reports),
        sessions: reports
            .iter()
            .map(|r| (r.session, r.session_top1, r.ba_acc, r.na_acc, r.aa_acc, r.nn_acc, r.confusion_gap))
            .collect(),
    })
}

/// Cumulative class count per session of a benchmark-style schedule,
/// computed without pixels. `preset` is "cifar100", "mini_imagenet" or "cub200".
#[pyfunction]
#[pyo3(signature = (preset, seed = 0))]
fn session_plan(preset: &str, seed: u64) -> PyResult<Vec<usize>> {
    let (dataset, base, sessions, way) = match preset {
        "cifar100" => (IndexOnlyDataset::cifar100(), 60, 8, 5),
        "mini_imagenet" => (IndexOnlyDataset::mini_imagenet(), 60, 8, 5),
        "cub200" => (IndexOnlyDataset::cub200(), 100, 10, 10),
        other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
    };
    let schedule = build_schedule(&dataset, base, sessions, way, 5, seed).map_err(to_py)?;
    Ok(core_plan(&schedule).iter().map(|r| r.cumulative_classes).collect())
}

#[pymodule]
fn rdi_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RdiError", m.py().get_type::<RdiError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyFeatureMap>()?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyPatchMask>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(alr_mask, m)?)?;
    m.add_function(wrap_pyfunction!(ali_mask, m)?)?;
    m.add_function(wrap_pyfunction!(masked_pool, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(session_plan, m)?)?;
    Ok(())
}
