//! Python bindings. Matrices cross the boundary as lists of rows; structured
//! results come back as plain dicts.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use ids_confidence::confidence::{self, MetricKind, NeighborRanking};
use ids_confidence::config::{CorrelationMethod, RunConfig};
use ids_confidence::detector::{self, Cell, ErrorNormalizer};
use ids_confidence::evaluation;
use ids_confidence::ingest;
use ids_confidence::numcore::{self, Matrix};
use ids_confidence::vae::{self, VaeConfig};
use ids_confidence::Error;

fn to_py(err: Error) -> PyErr {
    let msg = format!("{}: {err}", err.kind());
    match err {
        Error::Io { .. } => PyOSError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("empty matrix"));
    }
    Matrix::from_rows(&rows).map_err(to_py)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Serializes through JSON so every struct arrives as a dict.
fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_cells(cells: Vec<String>) -> PyResult<Vec<Cell>> {
    cells
        .iter()
        .map(|c| match c.to_ascii_uppercase().as_str() {
            "TP" => Ok(Cell::Tp),
            "FP" => Ok(Cell::Fp),
            "TN" => Ok(Cell::Tn),
            "FN" => Ok(Cell::Fn),
            other => Err(PyValueError::new_err(format!(
                "unknown confusion cell {other:?}"
            ))),
        })
        .collect()
}

/// Encoded NSL-KDD records: `x` rows, binary labels and feature names.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: ingest::EncodedDataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.x)
    }

    #[getter]
    fn y(&self) -> Vec<u8> {
        self.inner.y.clone()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(intrusion_fraction, normal_fraction)`.
    fn class_balance(&self) -> PyResult<(f64, f64)> {
        let b = ingest::dataset_stats(&self.inner).map_err(to_py)?;
        Ok((b.intrusion, b.normal))
    }
}

/// Fitted one-hot and min-max encoder.
#[pyclass(name = "Preprocessor", frozen)]
struct PyPreprocessor {
    inner: ingest::PreprocessorState,
}

#[pymethods]
impl PyPreprocessor {
    #[staticmethod]
    fn fit(path: &str) -> PyResult<Self> {
        let records = ingest::load_records(path.as_ref()).map_err(to_py)?;
        Ok(PyPreprocessor {
            inner: ingest::fit_preprocessor(&records).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyPreprocessor {
            inner: ingest::PreprocessorState::load(path.as_ref()).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(to_py)
    }

    fn transform_file(&self, path: &str) -> PyResult<PyDataset> {
        let records = ingest::load_records(path.as_ref()).map_err(to_py)?;
        Ok(PyDataset {
            inner: self.inner.transform(&records),
        })
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }
}

/// The variational autoencoder.
#[pyclass(name = "Vae", frozen)]
struct PyVae {
    inner: vae::Vae,
}

#[pymethods]
impl PyVae {
    /// Trains on `x`. `config` is a JSON object with the VAE settings;
    /// missing keys take their defaults. Returns `(model, per-epoch stats)`.
    #[staticmethod]
    #[pyo3(signature = (x, config = None))]
    fn train<'py>(
        py: Python<'py>,
        x: Vec<Vec<f64>>,
        config: Option<&str>,
    ) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let cfg: VaeConfig = match config {
            Some(text) => {
                serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?
            }
            None => VaeConfig::default(),
        };
        let x = matrix(x)?;
        let (model, report) = py.detach(|| vae::train(&x, &cfg)).map_err(to_py)?;
        Ok((PyVae { inner: model }, to_dict(py, &report)?))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyVae {
            inner: vae::Vae::load(path.as_ref()).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(to_py)
    }

    /// Posterior means.
    fn latent_embed(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.latent_embed(&matrix(x)?).map_err(to_py)?))
    }

    fn reconstruct(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.reconstruct(&matrix(x)?).map_err(to_py)?))
    }

    fn reconstruction_errors(&self, py: Python<'_>, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = matrix(x)?;
        py.detach(|| detector::reconstruction_errors(&self.inner, &x))
            .map_err(to_py)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

/// Whitened nearest-neighbour index over training embeddings.
#[pyclass(name = "LatentIndex", frozen)]
struct PyLatentIndex {
    inner: confidence::LatentIndex,
}

#[pymethods]
impl PyLatentIndex {
    #[new]
    #[pyo3(signature = (z_train, epsilon_scale = confidence::DEFAULT_EPSILON_SCALE))]
    fn new(z_train: Vec<Vec<f64>>, epsilon_scale: f64) -> PyResult<Self> {
        Ok(PyLatentIndex {
            inner: confidence::build_index(&matrix(z_train)?, epsilon_scale).map_err(to_py)?,
        })
    }

    /// `(distance, nn_index)`; `ranking` is "mahalanobis" or "euclidean".
    #[pyo3(signature = (z, ranking = "mahalanobis"))]
    fn score(&self, z: Vec<f64>, ranking: &str) -> PyResult<(f64, usize)> {
        let s = self
            .inner
            .mahalanobis_confidence_ranked(&z, parse_ranking(ranking)?)
            .map_err(to_py)?;
        Ok((s.value, s.nn_index))
    }

    #[pyo3(signature = (queries, ranking = "mahalanobis"))]
    fn score_batch(
        &self,
        py: Python<'_>,
        queries: Vec<Vec<f64>>,
        ranking: &str,
    ) -> PyResult<Vec<(f64, usize)>> {
        let q = matrix(queries)?;
        let ranking = parse_ranking(ranking)?;
        let scores = py
            .detach(|| self.inner.score_batch(&q, ranking))
            .map_err(to_py)?;
        Ok(scores.iter().map(|s| (s.value, s.nn_index)).collect())
    }

    /// Choquet score; uniform OWA weights when `weights` is omitted.
    #[pyo3(signature = (z, weights = None))]
    fn choquet(&self, z: Vec<f64>, weights: Option<Vec<f64>>) -> PyResult<(f64, usize)> {
        let w = weights.unwrap_or_else(|| confidence::uniform_owa_weights(self.inner.dim()));
        let s = self.inner.choquet_confidence(&z, &w).map_err(to_py)?;
        Ok((s.value, s.nn_index))
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn parse_ranking(s: &str) -> PyResult<NeighborRanking> {
    match s {
        "mahalanobis" => Ok(NeighborRanking::Mahalanobis),
        "euclidean" => Ok(NeighborRanking::Euclidean),
        other => Err(PyValueError::new_err(format!("unknown ranking {other:?}"))),
    }
}

#[pyfunction]
fn euclidean_confidence(train: Vec<Vec<f64>>, z: Vec<f64>) -> PyResult<(f64, usize)> {
    let s = confidence::euclidean_confidence(&matrix(train)?, &z).map_err(to_py)?;
    Ok((s.value, s.nn_index))
}

#[pyfunction]
fn cosine_confidence(train: Vec<Vec<f64>>, z: Vec<f64>) -> PyResult<(f64, usize)> {
    let s = confidence::cosine_confidence(&matrix(train)?, &z).map_err(to_py)?;
    Ok((s.value, s.nn_index))
}

/// Min-max normalization with the constants of `fit_on` (default: `re`).
#[pyfunction]
#[pyo3(signature = (re, fit_on = None))]
fn normalize_errors(re: Vec<f64>, fit_on: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let n = ErrorNormalizer::fit(fit_on.as_deref().unwrap_or(&re)).map_err(to_py)?;
    Ok(n.apply_all(&re))
}

/// F1-optimal threshold: `{"threshold": ..., "fit_metrics": {...}}`.
#[pyfunction]
fn fit_threshold<'py>(
    py: Python<'py>,
    re_norm: Vec<f64>,
    y: Vec<u8>,
) -> PyResult<Bound<'py, PyAny>> {
    to_dict(py, &detector::fit_threshold(&re_norm, &y).map_err(to_py)?)
}

#[pyfunction]
fn pearson_corr(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    numcore::pearson_corr(&a, &b).map_err(to_py)
}

#[pyfunction]
fn prediction_errors(y: Vec<u8>, re_norm: Vec<f64>) -> PyResult<Vec<f64>> {
    evaluation::prediction_errors(&y, &re_norm).map_err(to_py)
}

/// General and per-cell correlation; `cells` holds "TP"/"FP"/"TN"/"FN".
#[pyfunction]
#[pyo3(signature = (confidence, errors, cells, method = "pearson"))]
fn correlation_report<'py>(
    py: Python<'py>,
    confidence: Vec<f64>,
    errors: Vec<f64>,
    cells: Vec<String>,
    method: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let method = match method {
        "pearson" => CorrelationMethod::Pearson,
        "spearman" => CorrelationMethod::Spearman,
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    };
    let report = evaluation::correlation_report(&confidence, &errors, &parse_cells(cells)?, method)
        .map_err(to_py)?;
    to_dict(py, &report)
}

/// Full train-and-evaluate run from a JSON run configuration. Returns the
/// evaluation summary (threshold, metrics and one correlation report per metric).
#[pyfunction]
#[pyo3(signature = (config = None))]
fn run_pipeline<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = match config {
        Some(text) => RunConfig::from_json_str(text).map_err(to_py)?,
        None => RunConfig::default(),
    };
    let run = py
        .detach(|| evaluation::load_data(&cfg).and_then(|d| evaluation::run_pipeline(&d, &cfg)))
        .map_err(to_py)?;
    to_dict(py, &run.evaluation)
}

#[pyfunction]
fn metric_kinds() -> Vec<&'static str> {
    MetricKind::ALL.iter().map(|k| k.as_str()).collect()
}

#[pymodule]
#[pyo3(name = "ids_confidence")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPreprocessor>()?;
    m.add_class::<PyVae>()?;
    m.add_class::<PyLatentIndex>()?;
    m.add_function(wrap_pyfunction!(euclidean_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_errors, m)?)?;
    m.add_function(wrap_pyfunction!(fit_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_corr, m)?)?;
    m.add_function(wrap_pyfunction!(prediction_errors, m)?)?;
    m.add_function(wrap_pyfunction!(correlation_report, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(metric_kinds, m)?)?;
    let dict = PyDict::new(m.py());
    dict.set_item("latent_dim", VaeConfig::default().latent_dim)?;
    dict.set_item("beta", VaeConfig::default().beta)?;
    m.add("DEFAULTS", dict)?;
    Ok(())
}
