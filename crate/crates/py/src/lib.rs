//! Python bindings: cubes, configs, pretraining, evaluation and the loss
//! primitives.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use hsi_paws::autodiff::{ParamStore, Tensor};
use hsi_paws::config::TrainConfig;
use hsi_paws::data::{self, SyntheticSpec};
use hsi_paws::downstream::{EvalMode, EvalReport};
use hsi_paws::encoder;
use hsi_paws::{checks, paws, pipeline, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

/// A hyperspectral cube with optional ground truth.
#[pyclass(name = "Cube", skip_from_py_object)]
#[derive(Clone)]
struct PyCube {
    inner: data::HsiCube,
}

#[pymethods]
impl PyCube {
    /// Reads a cube file and, if given, its ground-truth file.
    #[staticmethod]
    #[pyo3(signature = (cube_path, gt_path=None, normalize=true))]
    fn load(cube_path: PathBuf, gt_path: Option<PathBuf>, normalize: bool) -> PyResult<Self> {
        let inner = pipeline::load_cube(&cube_path, gt_path.as_deref(), normalize).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (rows=64, cols=64, bands=32, classes=4, noise_sigma=0.05, region_seeds=None, seed=0))]
    fn synthetic(
        rows: usize,
        cols: usize,
        bands: usize,
        classes: usize,
        noise_sigma: f64,
        region_seeds: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SyntheticSpec {
            rows,
            cols,
            bands,
            classes,
            noise_sigma,
            region_seeds: region_seeds.unwrap_or(SyntheticSpec::default().region_seeds),
            seed,
        };
        Ok(Self { inner: data::generate_synthetic(&spec).map_err(py_err)? })
    }

    #[pyo3(signature = (cube_path, gt_path=None))]
    fn save(&self, cube_path: PathBuf, gt_path: Option<PathBuf>) -> PyResult<()> {
        data::write_cube(&self.inner, cube_path).map_err(py_err)?;
        if let Some(g) = gt_path {
            data::write_gt(&self.inner, g).map_err(py_err)?;
        }
        Ok(())
    }

    fn normalize_bands(&mut self) {
        self.inner.normalize_bands();
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.rows, self.inner.cols, self.inner.bands)
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    /// Spectrum of one pixel.
    fn spectrum(&self, row: usize, col: usize) -> PyResult<Vec<f32>> {
        if row >= self.inner.rows || col >= self.inner.cols {
            return Err(PyValueError::new_err(format!("pixel ({row}, {col}) outside cube")));
        }
        Ok(self.inner.spectrum(row, col).to_vec())
    }

    /// Row-major ground-truth labels, or `None`.
    fn labels(&self) -> Option<Vec<u16>> {
        self.inner.gt.clone()
    }

    fn __repr__(&self) -> String {
        format!("Cube({}x{}x{}, classes={})", self.inner.rows, self.inner.cols, self.inner.bands, self.inner.class_count())
    }
}

/// Resolved run configuration.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text=""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self { inner: TrainConfig::parse(text).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: TrainConfig::load(&path).map_err(py_err)? })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    /// Every setting, defaults included, as TOML.
    fn resolved(&self) -> String {
        self.inner.resolved()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    /// Cube generated from the `[synth]` section and the config seed.
    fn synthetic_cube(&self) -> PyResult<PyCube> {
        Ok(PyCube { inner: data::generate_synthetic(&self.inner.synthetic_spec()).map_err(py_err)? })
    }
}

/// Encoder parameters.
#[pyclass(name = "Model", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ParamStore,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: encoder::read_model(path).map_err(py_err)? })
    }

    /// Randomly initialized encoder for `config` and a cube with `bands` bands.
    #[staticmethod]
    fn untrained(config: &PyConfig, bands: usize, seed: u64) -> PyResult<Self> {
        let enc = encoder::Encoder::new(config.inner.encoder_config(bands)).map_err(py_err)?;
        Ok(Self { inner: pipeline::init_params(&enc, seed).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        encoder::write_model(&self.inner, path).map_err(py_err)
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().map(str::to_string).collect()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Model({} tensors, {} parameters)", self.inner.len(), self.inner.numel())
    }
}

/// Accuracy summary of one evaluation.
#[pyclass(name = "Report", get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyReport {
    mode: String,
    overall_accuracy: f64,
    correct: usize,
    sample_count: usize,
    per_class_accuracy: Vec<f64>,
    per_class_count: Vec<usize>,
    config_digest: String,
}

impl From<EvalReport> for PyReport {
    fn from(r: EvalReport) -> Self {
        Self {
            mode: r.mode.to_string(),
            overall_accuracy: r.overall_accuracy,
            correct: r.correct,
            sample_count: r.sample_count,
            per_class_accuracy: r.per_class_accuracy,
            per_class_count: r.per_class_count,
            config_digest: r.config_digest,
        }
    }
}

#[pymethods]
impl PyReport {
    fn __repr__(&self) -> String {
        format!("Report(mode={}, overall_accuracy={:.4})", self.mode, self.overall_accuracy)
    }
}

/// Pretrains an encoder; returns the model and the per-epoch mean loss.
#[pyfunction]
#[pyo3(signature = (cube, config, seed=None))]
fn pretrain(py: Python<'_>, cube: &PyCube, config: &PyConfig, seed: Option<u64>) -> PyResult<(PyModel, Vec<f64>)> {
    let seed = seed.unwrap_or(config.inner.seed);
    let (cube, cfg) = (cube.inner.clone(), config.inner.clone());
    let out = py.detach(move || pipeline::pretrain(&cube, &cfg, seed)).map_err(py_err)?;
    Ok((PyModel { inner: out.params }, out.epoch_losses))
}

/// Evaluates `model` with `mode` in {linear, finetune, snn, supervised}.
#[pyfunction]
#[pyo3(signature = (cube, config, model, mode, seed=None))]
fn evaluate(
    py: Python<'_>,
    cube: &PyCube,
    config: &PyConfig,
    model: &PyModel,
    mode: &str,
    seed: Option<u64>,
) -> PyResult<PyReport> {
    let mode: EvalMode = mode.parse().map_err(py_err)?;
    let seed = seed.unwrap_or(config.inner.seed);
    let (cube, cfg, params) = (cube.inner.clone(), config.inner.clone(), model.inner.clone());
    let report = py.detach(move || pipeline::evaluate(&cube, &cfg, &params, mode, seed)).map_err(py_err)?;
    Ok(report.into())
}

/// Soft nearest neighbour class probabilities of `queries` against `support`.
#[pyfunction]
#[pyo3(signature = (queries, support, labels, tau=0.25))]
fn snn_predict(queries: Vec<Vec<f64>>, support: Vec<Vec<f64>>, labels: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let p = paws::snn_predict(&tensor(queries)?, &tensor(support)?, &tensor(labels)?, tau).map_err(py_err)?;
    Ok(to_rows(&p))
}

#[pyfunction]
#[pyo3(signature = (p, temperature=0.1))]
fn sharpen(p: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    paws::sharpen(&p, temperature).map_err(py_err)
}

/// Consistency loss of anchor and positive probability rows.
#[pyfunction]
#[pyo3(signature = (p_anchor, p_positive, temperature=0.1))]
fn paws_loss(p_anchor: Vec<Vec<f64>>, p_positive: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    let hyper = paws::PawsHyper { sharpen_temperature: temperature, ..Default::default() };
    Ok(paws::paws_loss(&tensor(p_anchor)?, &tensor(p_positive)?, &hyper).map_err(py_err)?.loss)
}

/// Worst relative gradient error of every layer check, by name.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64)>> {
    Ok(checks::gradient_suite(seed)
        .map_err(py_err)?
        .into_iter()
        .map(|r| (r.name, r.max_relative_error))
        .collect())
}

#[pymodule]
#[pyo3(name = "hsi_paws")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCube>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(snn_predict, m)?)?;
    m.add_function(wrap_pyfunction!(sharpen, m)?)?;
    m.add_function(wrap_pyfunction!(paws_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
