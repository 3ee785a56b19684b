//! Python bindings: experiment configs, the pipeline stages, and the core
//! distance and loss functions.

use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mmfs::data::{synth_paired_digits as synth, FrameSequence};
use mmfs::eval::Summary;
use mmfs::pipeline::{self, ExperimentConfig};
use mmfs::Error;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config { .. } | Error::Argument(_) | Error::Shape(_) | Error::EmptyItem(_) => PyValueError::new_err(msg),
        Error::DegenerateVector(_) | Error::Format(_) | Error::Contamination(_) => PyValueError::new_err(msg),
        Error::Io { .. } | Error::MissingArtifact { .. } => PyOSError::new_err(msg),
        Error::State(_) | Error::NoNegative(_) => PyRuntimeError::new_err(msg),
    }
}

fn sequence(frames: Vec<Vec<f32>>) -> PyResult<FrameSequence> {
    FrameSequence::from_frames(&frames).map_err(py_err)
}

/// An experiment configuration. Build from TOML text, or with no argument for the defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: ExperimentConfig::from_toml(toml).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig { inner: ExperimentConfig::load(&path).map_err(py_err)? })
    }

    #[getter]
    fn master_seed(&self) -> u64 {
        self.inner.master_seed
    }

    #[setter]
    fn set_master_seed(&mut self, seed: u64) {
        self.inner.master_seed = seed;
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.inner.out_dir = dir;
    }

    #[getter]
    fn arms(&self) -> Vec<String> {
        self.inner.arms.clone()
    }

    #[setter]
    fn set_arms(&mut self, arms: Vec<String>) {
        self.inner.arms = arms;
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    fn __repr__(&self) -> String {
        format!("Config(master_seed={}, config_hash={})", self.inner.master_seed, self.inner.config_hash())
    }
}

/// Per-arm accuracies of an evaluation.
#[pyclass(name = "Summary", frozen, skip_from_py_object)]
struct PySummary {
    inner: Summary,
}

#[pymethods]
impl PySummary {
    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    fn arms(&self) -> Vec<String> {
        self.inner.arms.keys().cloned().collect()
    }

    /// Mean accuracy in percent and the 95% half-width (None for a single model).
    fn accuracy(&self, arm: &str) -> PyResult<(f64, Option<f64>)> {
        let a = self.inner.arms.get(arm).ok_or_else(|| PyKeyError::new_err(arm.to_string()))?;
        Ok((a.mean, a.ci95))
    }

    fn table(&self) -> String {
        mmfs::eval::format_table(&self.inner)
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("summary serializes")
    }
}

fn stage(py: Python<'_>, cfg: &PyConfig, f: fn(&ExperimentConfig) -> mmfs::Result<()>) -> PyResult<()> {
    let cfg = cfg.inner.clone();
    py.detach(move || f(&cfg)).map_err(py_err)
}

fn summary_stage(py: Python<'_>, cfg: &PyConfig, f: fn(&ExperimentConfig) -> mmfs::Result<Summary>) -> PyResult<PySummary> {
    let cfg = cfg.inner.clone();
    let inner = py.detach(move || f(&cfg)).map_err(py_err)?;
    Ok(PySummary { inner })
}

#[pyfunction]
fn prepare(py: Python<'_>, config: &PyConfig) -> PyResult<()> {
    stage(py, config, pipeline::prepare)
}

#[pyfunction]
fn mine(py: Python<'_>, config: &PyConfig) -> PyResult<()> {
    stage(py, config, pipeline::mine)
}

#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig) -> PyResult<()> {
    stage(py, config, pipeline::train)
}

#[pyfunction]
fn evaluate(py: Python<'_>, config: &PyConfig) -> PyResult<PySummary> {
    summary_stage(py, config, pipeline::evaluate)
}

#[pyfunction]
fn report(py: Python<'_>, config: &PyConfig) -> PyResult<PySummary> {
    summary_stage(py, config, pipeline::report)
}

#[pyfunction]
fn run(py: Python<'_>, config: &PyConfig) -> PyResult<PySummary> {
    summary_stage(py, config, pipeline::run)
}

/// DTW distance between two frame sequences given as lists of frames.
#[pyfunction]
fn dtw_distance(a: Vec<Vec<f32>>, b: Vec<Vec<f32>>) -> PyResult<f64> {
    mmfs::features::dtw_distance(&sequence(a)?, &sequence(b)?).map_err(py_err)
}

#[pyfunction]
fn cosine_distance(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    mmfs::features::cosine_distance(&u, &v).map_err(py_err)
}

#[pyfunction]
fn mtriplet_loss(z_a: Vec<f64>, z_v: Vec<f64>, z_a_neg: Vec<f64>, z_v_neg: Vec<f64>, margin: f64) -> PyResult<f64> {
    mmfs::models::mtriplet_loss(&z_a, &z_v, &z_a_neg, &z_v_neg, margin).map_err(py_err)
}

#[pyfunction]
fn cae_loss(y_hat: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    mmfs::models::cae_loss(&y_hat, &target).map_err(py_err)
}

type Labelled<T> = (Vec<T>, Vec<usize>);

/// Synthetic paired digits: `(speech, speech_labels), (images, image_labels)`.
/// Speech items are lists of frames, images flat lists of 784 pixels.
#[pyfunction]
fn synth_paired_digits(n_per_class: usize, noise: f64, seed: u64) -> PyResult<(Labelled<Vec<Vec<f32>>>, Labelled<Vec<f32>>)> {
    let (speech, images, _) = synth(n_per_class, noise, seed).map_err(py_err)?;
    let speech_items = speech.items().iter().map(|it| it.data.frames().map(<[f32]>::to_vec).collect()).collect();
    let speech_labels = (0..speech.len()).map(|i| speech.label(i).expect("synthetic items are labelled")).collect();
    let image_items = images.items().iter().map(|it| it.data.pixels().to_vec()).collect();
    let image_labels = (0..images.len()).map(|i| images.label(i).expect("synthetic items are labelled")).collect();
    Ok(((speech_items, speech_labels), (image_items, image_labels)))
}

#[pymodule]
fn mmfs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySummary>()?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(mine, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(dtw_distance, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_distance, m)?)?;
    m.add_function(wrap_pyfunction!(mtriplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cae_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth_paired_digits, m)?)?;
    Ok(())
}
