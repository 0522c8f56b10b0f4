//! Python bindings: the scoring and thresholding primitives plus a suite
//! runner that returns JSON.

use comet_core::gmmstream::GmmState;
use comet_core::metrics;
use comet_core::netcore;
use comet_core::pseudolabel::{self, PseudoLabel};
use comet_core::suite;
use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn to_py(e: comet_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!(
            "{what}: rows have different lengths"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> Vec<f64> {
    netcore::softmax(&logits)
}

#[pyfunction]
fn h_score(acc_known: f64, acc_unknown: f64) -> f64 {
    metrics::h_score(acc_known, acc_unknown)
}

#[pyfunction]
fn normalized_entropy(probs: Vec<f64>) -> f64 {
    comet_core::losses::normalized_entropy(&probs)
}

/// Returns `("known", class)`, `("unknown", None)` or `("ignored", None)`.
#[pyfunction]
fn assign(probs: Vec<f64>, score: f64, tau_l: f64, tau_u: f64) -> (&'static str, Option<usize>) {
    match pseudolabel::assign(&probs, score, tau_l, tau_u) {
        PseudoLabel::Known(c) => ("known", Some(c)),
        PseudoLabel::Unknown => ("unknown", None),
        PseudoLabel::Ignored => ("ignored", None),
    }
}

/// Predicted class, or `len(student_probs)` for unknown.
#[pyfunction]
fn decide_inference(
    student_probs: Vec<f64>,
    teacher_probs: Vec<f64>,
    score: f64,
    tau_l: f64,
    tau_u: f64,
) -> PyResult<usize> {
    if student_probs.len() != teacher_probs.len() {
        return Err(PyValueError::new_err(
            "student and teacher probabilities differ in length",
        ));
    }
    Ok(pseudolabel::decide_inference(
        &student_probs,
        &teacher_probs,
        score,
        tau_l,
        tau_u,
    ))
}

/// Streaming class-conditional Gaussians.
#[pyclass(name = "GmmState")]
struct PyGmmState {
    inner: GmmState,
}

#[pymethods]
impl PyGmmState {
    #[new]
    #[pyo3(signature = (num_classes, dim, alpha, cov_reg = 1e-4))]
    fn new(num_classes: usize, dim: usize, alpha: f64, cov_reg: f64) -> PyResult<Self> {
        Ok(PyGmmState {
            inner: GmmState::new(num_classes, dim, alpha, cov_reg).map_err(to_py)?,
        })
    }

    /// One update from teacher softmax rows and reduced features.
    fn update(&mut self, probs: Vec<Vec<f64>>, features: Vec<Vec<f64>>) -> PyResult<()> {
        let p = matrix(&probs, "probs")?;
        let f = matrix(&features, "features")?;
        self.inner.update(&p, &f).map_err(to_py)
    }

    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    fn means(&self) -> Vec<Vec<f64>> {
        (0..self.inner.num_classes())
            .map(|c| self.inner.mean(c).iter().copied().collect())
            .collect()
    }

    fn covariance(&self, class_index: usize) -> PyResult<Vec<Vec<f64>>> {
        if class_index >= self.inner.num_classes() {
            return Err(PyValueError::new_err("class index out of range"));
        }
        let s = self.inner.covariance(class_index);
        Ok((0..s.nrows())
            .map(|i| s.row(i).iter().copied().collect())
            .collect())
    }

    fn initialized(&self) -> Vec<bool> {
        self.inner.initialized().to_vec()
    }

    fn responsibilities(&self, feature: Vec<f64>) -> PyResult<Vec<f64>> {
        let d = self.inner.densities().map_err(to_py)?;
        d.responsibilities(&feature).map_err(to_py)
    }

    fn mahalanobis_score(&self, feature: Vec<f64>) -> PyResult<f64> {
        let d = self.inner.densities().map_err(to_py)?;
        pseudolabel::score_mahalanobis(&d, &feature).map_err(to_py)
    }

    fn entropy_score(&self, feature: Vec<f64>) -> PyResult<f64> {
        let r = self.responsibilities(feature)?;
        pseudolabel::score_entropy(&r).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.snapshot().to_json().map_err(to_py)
    }
}

/// Dual-threshold calibration over the first `n_init` batches.
#[pyclass(name = "ThresholdCalibrator")]
struct PyThresholdCalibrator {
    inner: pseudolabel::ThresholdCalibrator,
}

#[pymethods]
impl PyThresholdCalibrator {
    #[new]
    #[pyo3(signature = (p_reject = 0.5, n_init = 50))]
    fn new(p_reject: f64, n_init: usize) -> PyResult<Self> {
        Ok(PyThresholdCalibrator {
            inner: pseudolabel::ThresholdCalibrator::new(p_reject, n_init).map_err(to_py)?,
        })
    }

    fn observe(&mut self, scores: Vec<f64>) -> PyResult<()> {
        self.inner.observe(&scores).map_err(to_py)
    }

    fn thresholds(&self) -> Option<(f64, f64)> {
        self.inner.thresholds()
    }

    #[getter]
    fn frozen(&self) -> bool {
        self.inner.is_frozen()
    }
}

/// Runs a suite given as TOML text and returns a JSON list with one entry
/// per run and seed (`name`, `seed`, `status`, `report`).
#[pyfunction]
#[pyo3(signature = (config, seeds = None, jobs = 1))]
fn run_suite(
    py: Python<'_>,
    config: &str,
    seeds: Option<Vec<u64>>,
    jobs: usize,
) -> PyResult<String> {
    let mut s = suite::parse_suite(config).map_err(to_py)?;
    if let Some(seeds) = seeds {
        s.seeds = seeds;
    }
    let res = py
        .detach(|| suite::execute(&s, jobs.max(1)))
        .map_err(to_py)?;
    let mut out = Vec::with_capacity(res.outcomes.len());
    for (o, row) in res.outcomes.iter().zip(&res.rows) {
        let report = match &o.report {
            Ok(r) => serde_json::to_value(r).map_err(|e| PyValueError::new_err(e.to_string()))?,
            Err(_) => serde_json::Value::Null,
        };
        out.push(serde_json::json!({
            "name": row.name,
            "seed": o.seed,
            "status": row.status,
            "report": report,
        }));
    }
    serde_json::to_string(&out).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn gmm_comet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(h_score, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(assign, m)?)?;
    m.add_function(wrap_pyfunction!(decide_inference, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_class::<PyGmmState>()?;
    m.add_class::<PyThresholdCalibrator>()?;
    Ok(())
}
