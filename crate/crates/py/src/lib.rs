//! Python module `geodin`.
//!
//! Configuration objects cross the boundary as plain dicts holding the same
//! keys as the TOML run configuration sections; results come back as dicts
//! and lists.

use std::path::PathBuf;

use geodin::bench::{self, ScoreName, ShiftSpec, SyntheticTask, TaskConfig};
use geodin::calibration::{self, CalibConfig};
use geodin::linalg::Matrix;
use geodin::persistence::{self, ModelSummary};
use geodin::scores::{self, FeatureVector};
use geodin::trainer::{self, TrainConfig};
use geodin::GeodinError;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(
    geodin,
    GeodinException,
    PyException,
    "Raised for data, state and numeric failures."
);

fn to_py_err(e: GeodinError) -> PyErr {
    match e {
        GeodinError::Config(_) | GeodinError::UnsupportedVariant { .. } | GeodinError::Shape(_) => {
            PyValueError::new_err(e.to_string())
        }
        GeodinError::Io { .. } => PyOSError::new_err(e.to_string()),
        other => GeodinException::new_err(other.to_string()),
    }
}

trait OrPyErr<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for geodin::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

/// Deserialises a dict of overrides on top of `T::default()`.
fn config_from<T: DeserializeOwned + Default>(py: Python<'_>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(d) = overrides else {
        return Ok(T::default());
    };
    let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("invalid configuration: {e}")))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_spec(s: &str) -> PyResult<ShiftSpec> {
    s.parse().py_err()
}

/// Labelled samples with the seed used to derive their corruptions.
#[pyclass(name = "Dataset", module = "geodin", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    pub inner: geodin::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (inputs, labels, seed = 0))]
    fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(PyDataset {
            inner: geodin::Dataset::new(inputs, labels, seed).py_err()?,
        })
    }

    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        self.inner.inputs.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Copy corrupted by a covariate shift given as `kind:severity`.
    fn corrupt(&self, shift: &str) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: bench::corrupt(&self.inner, &parse_spec(shift)?).py_err()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, dim={}, seed={})",
            self.inner.len(),
            self.inner.dim(),
            self.inner.seed
        )
    }
}

/// Synthetic benchmark task: train/val/test splits and held-out concept
/// groups.
#[pyclass(name = "Task", module = "geodin", frozen)]
pub struct PyTask {
    pub inner: SyntheticTask,
}

#[pymethods]
impl PyTask {
    /// Builds a task from `TaskConfig` keys, e.g. `Task({"n_classes": 4})`.
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: TaskConfig = config_from(py, config)?;
        Ok(PyTask {
            inner: bench::build_task(&cfg).py_err()?,
        })
    }

    #[getter]
    fn train(&self) -> PyDataset {
        PyDataset {
            inner: self.inner.train.clone(),
        }
    }

    #[getter]
    fn val(&self) -> PyDataset {
        PyDataset {
            inner: self.inner.val.clone(),
        }
    }

    #[getter]
    fn test(&self) -> PyDataset {
        PyDataset {
            inner: self.inner.test.clone(),
        }
    }

    #[getter]
    fn n_concept_groups(&self) -> usize {
        self.inner.concept.len()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    /// OOD side of a detection cell: `none`, `kind:severity` or
    /// `concept_split:group`.
    fn shifted(&self, shift: &str) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: bench::shifted_set(&self.inner, &parse_spec(shift)?).py_err()?,
        })
    }
}

#[pyclass(name = "Model", module = "geodin", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    pub inner: geodin::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: persistence::load_model(path).py_err()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        persistence::save_model(&self.inner, path).py_err()
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyModel {
            inner: persistence::model_from_bytes(data).py_err()?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &persistence::model_to_bytes(&self.inner))
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.head.variant.as_str()
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &ModelSummary::from(&self.inner))
    }

    fn logits(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.logits(&x).py_err()
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        self.inner.predict(&x).py_err()
    }

    fn feature(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.feature(&x).py_err()?.as_slice().to_vec())
    }

    fn accuracy(&self, data: &PyDataset) -> PyResult<f64> {
        self.inner.accuracy(&data.inner).py_err()
    }

    /// `g`, `h`, `u`, `msp` and `energy` for every sample.
    fn scores<'py>(&self, py: Python<'py>, data: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &bench::score_dataset(&self.inner, &data.inner).py_err()?)
    }

    /// Accuracy, ECE and NLL on `data`.
    fn evaluate<'py>(&self, py: Python<'py>, data: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &calibration::evaluate(&self.inner, &data.inner).py_err()?)
    }

    /// Re-fits the alpha/beta heads on `tuning`; returns the calibrated
    /// model and the before/after report.
    #[pyo3(signature = (tuning, config = None))]
    fn calibrate<'py>(
        &self,
        py: Python<'py>,
        tuning: &PyDataset,
        config: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
        let cfg: CalibConfig = config_from(py, config)?;
        let (model, report) = calibration::calibrate(&self.inner, &tuning.inner, &[], &cfg).py_err()?;
        Ok((PyModel { inner: model }, to_py(py, &report)?))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_dim={}, n_classes={}, variant={})",
            self.inner.input_dim(),
            self.inner.n_classes(),
            self.inner.head.variant
        )
    }
}

/// Trains on `data` with `TrainConfig` keys (nested `arch` included);
/// returns the model and per-epoch statistics.
#[pyfunction]
#[pyo3(signature = (data, config = None))]
fn train<'py>(
    py: Python<'py>,
    data: &PyDataset,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let cfg: TrainConfig = config_from(py, config)?;
    let out = py.detach(|| trainer::train(&cfg, &data.inner)).py_err()?;
    Ok((PyModel { inner: out.model }, to_py(py, &out.history)?))
}

/// Detection rows for every `(score, shift)` cell. Defaults to all scores
/// and the control, covariate and concept cells.
#[pyfunction]
#[pyo3(signature = (model, task, scores = None, shifts = None, jobs = 1))]
fn sweep<'py>(
    py: Python<'py>,
    model: &PyModel,
    task: &PyTask,
    scores: Option<Vec<String>>,
    shifts: Option<Vec<String>>,
    jobs: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let scores: Vec<ScoreName> = match scores {
        Some(s) => s.iter().map(|n| n.parse()).collect::<geodin::Result<_>>().py_err()?,
        None => ScoreName::ALL.to_vec(),
    };
    let specs = match shifts {
        Some(s) => s.iter().map(|t| parse_spec(t)).collect::<PyResult<Vec<_>>>()?,
        None => bench::default_specs(&task.inner),
    };
    let report = py
        .detach(|| bench::sweep(&model.inner, &task.inner, &scores, &specs, jobs))
        .py_err()?;
    to_py(py, &report.rows)
}

/// Covariate, concept and combined scores of one feature against class
/// weights `w` (one row per class).
#[pyfunction]
fn geometry_scores(feature: Vec<f64>, w: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    let w = Matrix::from_vec(rows, cols, w.into_iter().flatten().collect()).py_err()?;
    let f = FeatureVector::new(feature).py_err()?;
    let view = scores::geometry_view(&f, &w).py_err()?;
    Ok((
        scores::covariate_score(&f),
        scores::concept_score(&view),
        scores::combined_score(&view),
    ))
}

#[pyfunction]
fn auroc(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<f64> {
    bench::auroc(&id_scores, &ood_scores).py_err()
}

#[pyfunction]
fn tnr_at_tpr95(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<f64> {
    bench::tnr_at_tpr95(&id_scores, &ood_scores).py_err()
}

#[pyfunction]
#[pyo3(signature = (confidences, correct, n_bins = calibration::DEFAULT_BINS))]
fn ece(confidences: Vec<f64>, correct: Vec<bool>, n_bins: usize) -> PyResult<f64> {
    calibration::ece(&confidences, &correct, n_bins).py_err()
}

#[pymodule]
#[pyo3(name = "geodin")]
pub fn geodin_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GeodinError", m.py().get_type::<GeodinException>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTask>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(geometry_scores, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(tnr_at_tpr95, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    Ok(())
}
