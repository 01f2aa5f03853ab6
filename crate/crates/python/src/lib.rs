//! Python bindings. Configs cross the boundary as dicts (JSON-compatible) and
//! matrices as lists of rows.

use std::collections::BTreeMap;

use evofa_core::backbone::{BackboneConfig, Model};
use evofa_core::data::{export_features, generate_synthetic_drift, import_features, DatasetIndex, DriftConfig, Role};
use evofa_core::harness::{
    self, cell_split, evaluate_cell, run_protocol, train_cell, Cell, ExperimentConfig,
    ResultTable,
};
use evofa_core::mmd::{median_heuristic, mmd2_value, KernelSpec};
use evofa_core::{Error, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.root() {
        Error::Io(_) | Error::Ingest { .. } => PyIOError::new_err(msg),
        Error::Config(_) | Error::Argument(_) | Error::Dimension(_) | Error::Schema(_) | Error::Json(_) => {
            PyValueError::new_err(msg)
        }
        _ => PyRuntimeError::new_err(msg),
    }
}

/// Deserializes a dict through Python's json module; `None` gives the defaults.
fn from_dict<T: DeserializeOwned + Default>(py: Python<'_>, d: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(d) = d else { return Ok(T::default()) };
    let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_dict<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

#[pyclass(name = "Dataset", module = "evofa", frozen)]
struct PyDataset {
    inner: DatasetIndex,
}

#[pymethods]
impl PyDataset {
    /// Synthetic drifting dataset from a generator config dict.
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn synthetic(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: DriftConfig = from_dict(py, config)?;
        Ok(Self {
            inner: generate_synthetic_drift(&cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(manifest: &str) -> PyResult<Self> {
        Ok(Self {
            inner: import_features(manifest).map_err(to_py)?,
        })
    }

    /// Writes the dataset as a manifest plus feature files; returns the manifest path.
    fn export(&self, dir: &str) -> PyResult<String> {
        let p = export_features(&self.inner, dir).map_err(to_py)?;
        Ok(p.to_string_lossy().into_owned())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn subjects(&self) -> Vec<u32> {
        self.inner.subjects()
    }

    fn sessions(&self, subject: u32) -> Vec<u32> {
        self.inner.sessions_of(subject)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// `(electrodes, bands)`.
    #[getter]
    fn schema(&self) -> (usize, usize) {
        let s = self.inner.schema();
        (s.electrodes, s.bands)
    }

    /// Feature matrix and label of sample `i` in dataset order.
    fn sample(&self, i: usize) -> PyResult<(Vec<Vec<f64>>, usize)> {
        let s = self
            .inner
            .samples()
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("sample {i} out of range")))?;
        Ok((rows_of(&s.features), s.label))
    }
}

#[pyclass(name = "Model", module = "evofa", frozen)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyDict>>, seed: u64) -> PyResult<Self> {
        let cfg: BackboneConfig = from_dict(py, config)?;
        Ok(Self {
            inner: Model::new(cfg, seed).map_err(to_py)?,
        })
    }

    /// Returns the model and its checkpoint metadata.
    #[staticmethod]
    fn load<'py>(py: Python<'py>, path: &str) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let (inner, header) = harness::load_checkpoint(path).map_err(to_py)?;
        Ok((Self { inner }, to_dict(py, &header.meta)?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        harness::save_checkpoint(&self.inner, &BTreeMap::new(), path).map_err(to_py)
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner.config)
    }

    fn checksum(&self) -> u64 {
        self.inner.checksum()
    }

    /// Checksum of the parameters that adaptation must never change.
    fn frozen_checksum(&self) -> u64 {
        self.inner.frozen_checksum()
    }

    /// Adapter-space embeddings of one subject's session, one row per sample.
    fn embed(&self, dataset: &PyDataset, subject: u32, session: u32) -> PyResult<Vec<Vec<f64>>> {
        let pool = dataset.inner.session_pool(subject, session);
        let enc = self.inner.embed(&pool).map_err(to_py)?;
        let emb = Model::apply_adapter(&self.inner.phi, &enc).map_err(to_py)?;
        Ok(rows_of(&emb))
    }
}

fn experiment(py: Python<'_>, config: &Bound<'_, PyDict>) -> PyResult<(ExperimentConfig, DatasetIndex)> {
    let cfg: ExperimentConfig = from_dict(py, Some(config))?;
    let ds = cfg.load_dataset().map_err(to_py)?;
    cfg.validate_for(&ds).map_err(to_py)?;
    Ok((cfg, ds))
}

/// Meta-trains the few-shot model for one protocol cell.
#[pyfunction]
#[pyo3(signature = (config, subject, session=None))]
fn train(py: Python<'_>, config: &Bound<'_, PyDict>, subject: u32, session: Option<u32>) -> PyResult<PyModel> {
    let (mut cfg, ds) = experiment(py, config)?;
    cfg.supervised = false;
    let cell = Cell { subject, session };
    let t = py.detach(|| train_cell(&cfg, &ds, cell)).map_err(to_py)?;
    Ok(PyModel { inner: t.fsl.model })
}

/// Result rows (dicts) for one cell at each shot count.
#[pyfunction]
#[pyo3(signature = (config, model, subject, session=None, shots=vec![1], adapt=true))]
fn evaluate<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyDict>,
    model: &PyModel,
    subject: u32,
    session: Option<u32>,
    shots: Vec<usize>,
    adapt: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, ds) = experiment(py, config)?;
    let cell = Cell { subject, session };
    let rows = py
        .detach(|| evaluate_cell(&cfg, &ds, cell, &model.inner, &shots, adapt))
        .map_err(to_py)?;
    to_dict(py, &rows)
}

/// Full protocol run; returns `(csv, results)` where `results` holds rows and aggregates.
#[pyfunction]
fn compare<'py>(py: Python<'py>, config: &Bound<'py, PyDict>) -> PyResult<(String, Bound<'py, PyAny>)> {
    let (cfg, ds) = experiment(py, config)?;
    let run = py.detach(|| run_protocol(&cfg, &ds)).map_err(to_py)?;
    let json = run.table.to_json().map_err(to_py)?;
    let parsed = py.import("json")?.call_method1("loads", (json,))?;
    Ok((run.table.to_csv(), parsed))
}

/// Rebuilds the CSV from a results dict as returned by `compare`.
#[pyfunction]
fn results_csv(py: Python<'_>, results: &Bound<'_, PyDict>) -> PyResult<String> {
    let text: String = py.import("json")?.call_method1("dumps", (results,))?.extract()?;
    Ok(ResultTable::from_json(&text).map_err(to_py)?.to_csv())
}

/// Squared MMD between row sets under an equal-weight RBF mixture.
#[pyfunction]
fn mmd2(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, bandwidths: Vec<f64>) -> PyResult<f64> {
    let spec = KernelSpec::equal_weights(bandwidths).map_err(to_py)?;
    mmd2_value(&matrix(x)?, &matrix(y)?, &spec).map_err(to_py)
}

#[pyfunction]
fn median_bandwidth(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    median_heuristic(&matrix(x)?, &matrix(y)?).map_err(to_py)
}

/// Test-pool sample count for a protocol cell.
#[pyfunction]
#[pyo3(signature = (config, subject, session=None))]
fn test_pool_size(py: Python<'_>, config: &Bound<'_, PyDict>, subject: u32, session: Option<u32>) -> PyResult<usize> {
    let (cfg, ds) = experiment(py, config)?;
    let split = cell_split(&cfg, &ds, Cell { subject, session }).map_err(to_py)?;
    Ok(split.select(&ds, Role::Test).len())
}

#[pymodule]
fn evofa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(results_csv, m)?)?;
    m.add_function(wrap_pyfunction!(mmd2, m)?)?;
    m.add_function(wrap_pyfunction!(median_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(test_pool_size, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
