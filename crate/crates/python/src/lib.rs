//! Python bindings. Matrices cross the boundary as 2-D float64 numpy arrays.

use std::path::PathBuf;

use mmgfm_core as core;
use mmgfm_core::{
    Dataset, Error, FitConfig, FitResult, GroundTruth, InitMethod, Modality, ModalityType, ScenarioOverrides, Study,
};
use nalgebra::{DMatrix, DVector};
use numpy::ndarray::{Array1, Array2};
use numpy::{IntoPyArray, PyArray1, PyArray2, PyReadonlyArray2};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(a: &PyReadonlyArray2<'_, f64>) -> DMatrix<f64> {
    let v = a.as_array();
    DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[[i, j]])
}

fn array<'py>(py: Python<'py>, m: &DMatrix<f64>) -> Bound<'py, PyArray2<f64>> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)]).into_pyarray(py)
}

fn vector<'py>(py: Python<'py>, v: &DVector<f64>) -> Bound<'py, PyArray1<f64>> {
    Array1::from_iter(v.iter().copied()).into_pyarray(py)
}

fn arrays<'py>(py: Python<'py>, ms: &[DMatrix<f64>]) -> Vec<Bound<'py, PyArray2<f64>>> {
    ms.iter().map(|m| array(py, m)).collect()
}

/// An int applies to every study; a list gives one value per study.
#[derive(FromPyObject)]
enum PerStudy {
    One(usize),
    Each(Vec<usize>),
}

impl PerStudy {
    fn expand(self, studies: usize) -> Vec<usize> {
        match self {
            PerStudy::One(k) => vec![k; studies],
            PerStudy::Each(v) => v,
        }
    }
}

/// Observations of several studies over shared modalities.
#[pyclass(name = "Dataset", module = "mmgfm", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// `x[s][m]` is the `n_s x p_m` block of study `s`, modality `m`;
    /// `z[s]` the covariates; `types[m]` one of continuous, count, binomial;
    /// `trials[m]` optional per-variable binomial trial counts.
    #[new]
    #[pyo3(signature = (x, z, types, trials=None))]
    fn new(
        x: Vec<Vec<PyReadonlyArray2<'_, f64>>>,
        z: Vec<PyReadonlyArray2<'_, f64>>,
        types: Vec<String>,
        trials: Option<Vec<Vec<u32>>>,
    ) -> PyResult<Self> {
        if x.len() != z.len() {
            return Err(PyValueError::new_err(format!("{} studies in x but {} in z", x.len(), z.len())));
        }
        let kinds = types
            .iter()
            .map(|t| t.parse::<ModalityType>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(PyValueError::new_err)?;
        let mut studies = Vec::new();
        for (xs, zs) in x.iter().zip(&z) {
            if xs.len() != kinds.len() {
                return Err(PyValueError::new_err(format!(
                    "a study has {} modalities but {} types were given",
                    xs.len(),
                    kinds.len()
                )));
            }
            let modalities = xs
                .iter()
                .zip(&kinds)
                .enumerate()
                .map(|(m, (a, &kind))| {
                    let md = Modality::new(matrix(a), kind);
                    match trials.as_ref().and_then(|t| t.get(m)).filter(|t| !t.is_empty()) {
                        Some(t) => md.with_trials(t.clone()),
                        None => md,
                    }
                })
                .collect();
            studies.push(Study { modalities, z: matrix(zs) });
        }
        Ok(PyDataset {
            inner: Dataset { studies },
        })
    }

    #[getter]
    fn num_studies(&self) -> usize {
        self.inner.num_studies()
    }

    #[getter]
    fn num_modalities(&self) -> usize {
        self.inner.num_modalities()
    }

    #[getter]
    fn sample_sizes(&self) -> Vec<usize> {
        self.inner.sample_sizes()
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims()
    }

    #[getter]
    fn types(&self) -> Vec<&'static str> {
        self.inner.types().iter().map(|t| t.as_str()).collect()
    }

    fn x<'py>(&self, py: Python<'py>, study: usize, modality: usize) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let md = self
            .inner
            .studies
            .get(study)
            .and_then(|s| s.modalities.get(modality))
            .ok_or_else(|| PyValueError::new_err("study or modality index out of range"))?;
        Ok(array(py, &md.x))
    }

    fn z<'py>(&self, py: Python<'py>, study: usize) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let st = self
            .inner
            .studies
            .get(study)
            .ok_or_else(|| PyValueError::new_err("study index out of range"))?;
        Ok(array(py, &st.z))
    }

    /// Problems that would make a fit fail, as messages (empty when valid).
    fn validate(&self) -> Vec<String> {
        core::validate_dataset(&self.inner).violations.iter().map(|v| v.to_string()).collect()
    }

    /// Writes the dataset directory and returns the manifest path.
    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        core::save_dataset(&self.inner, &dir).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={:?}, p={:?}, types={:?})",
            self.inner.sample_sizes(),
            self.inner.dims(),
            self.types()
        )
    }
}

/// True parameters and latent factors of a simulated dataset.
#[pyclass(name = "GroundTruth", module = "mmgfm", frozen)]
struct PyGroundTruth {
    inner: GroundTruth,
}

#[pymethods]
impl PyGroundTruth {
    #[getter]
    fn f<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyArray2<f64>>> {
        arrays(py, &self.inner.f0)
    }

    #[getter]
    fn h<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyArray2<f64>>> {
        arrays(py, &self.inner.h0)
    }

    #[getter]
    fn v<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyArray2<f64>>> {
        arrays(py, &self.inner.v0)
    }

    #[getter]
    fn a<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyArray2<f64>>> {
        arrays(py, &self.inner.theta0.a)
    }

    #[getter]
    fn beta<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyArray2<f64>>> {
        arrays(py, &self.inner.theta0.beta)
    }

    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        core::save_truth(&self.inner, &dir).map_err(to_py)
    }
}

/// Estimated parameters, variational factors and the ELBO trace.
#[pyclass(name = "FitResult", module = "mmgfm", frozen)]
struct PyFitResult {
    inner: FitResult,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn elbo_trace(&self) -> Vec<f64> {
        self.inner.elbo_trace.clone()
    }

    #[getter]
    fn final_elbo(&self) -> Option<f64> {
        self.inner.final_elbo()
    }

    /// Covariate coefficients per modality (`p_m x d`).
    #[getter]
    fn beta<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyArray2<f64>>> {
        arrays(py, &self.inner.theta.beta)
    }

    /// Shared loadings per modality (`p_m x q`).
    #[getter]
    fn a<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyArray2<f64>>> {
        arrays(py, &self.inner.theta.a)
    }

    /// Study-specific loadings, indexed `[study][modality]`.
    #[getter]
    fn b<'py>(&self, py: Python<'py>) -> Vec<Vec<Bound<'py, PyArray2<f64>>>> {
        self.inner.theta.b.iter().map(|bs| arrays(py, bs)).collect()
    }

    /// Overdispersion variances, indexed `[study][modality]`.
    #[getter]
    fn lambda_<'py>(&self, py: Python<'py>) -> Vec<Vec<Bound<'py, PyArray1<f64>>>> {
        self.inner
            .theta
            .lambda
            .iter()
            .map(|ls| ls.iter().map(|l| vector(py, l)).collect())
            .collect()
    }

    /// Modality-shared factor variances (`S x M`).
    #[getter]
    fn sigma2<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        array(py, &self.inner.theta.sigma2)
    }

    /// Posterior means of the factors: a dict with lists `f`, `h`, `v`.
    fn factors<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let fac = core::extract_factors(&self.inner.phi);
        let d = PyDict::new(py);
        d.set_item("f", arrays(py, &fac.f))?;
        d.set_item("h", arrays(py, &fac.h))?;
        d.set_item("v", arrays(py, &fac.v))?;
        Ok(d)
    }

    /// Evidence lower bound of this fit on `dataset`.
    fn elbo(&self, dataset: &PyDataset) -> PyResult<f64> {
        core::elbo(&self.inner.theta, &self.inner.phi, &dataset.inner).map_err(to_py)
    }

    /// Recovery metrics against simulation truth.
    fn evaluate<'py>(&self, py: Python<'py>, truth: &PyGroundTruth) -> PyResult<Bound<'py, PyDict>> {
        let m = core::evaluate(&self.inner, &truth.inner).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("MT_F", m.mt_f)?;
        d.set_item("MT_H", m.mt_h)?;
        d.set_item("MT_V", m.mt_v)?;
        d.set_item("MT_A", m.mt_a)?;
        d.set_item("MT_B", m.mt_b)?;
        d.set_item("ME_beta", m.me_beta)?;
        Ok(d)
    }

    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        core::save_fit(&self.inner, &dir).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "FitResult(q={}, qs={:?}, iterations={}, converged={}, elbo={})",
            self.inner.theta.q,
            self.inner.theta.qs,
            self.inner.iterations,
            self.inner.converged,
            self.inner.final_elbo().map_or("None".to_string(), |e| e.to_string())
        )
    }
}

/// Names of the built-in simulation scenarios.
#[pyfunction]
fn scenarios() -> Vec<&'static str> {
    core::BUILTIN_SCENARIOS.to_vec()
}

/// Simulate a built-in scenario; returns `(Dataset, GroundTruth)`.
#[pyfunction]
#[pyo3(signature = (scenario, seed=0, sigma2_v=None, n=None, p=None, q=None, qs=None, param_seed=None))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    scenario: &str,
    seed: u64,
    sigma2_v: Option<f64>,
    n: Option<Vec<usize>>,
    p: Option<Vec<usize>>,
    q: Option<usize>,
    qs: Option<Vec<usize>>,
    param_seed: Option<u64>,
) -> PyResult<(PyDataset, PyGroundTruth)> {
    let ov = ScenarioOverrides {
        n,
        p,
        q,
        qs,
        sigma2_v,
        param_seed,
        seed: Some(seed),
        ..Default::default()
    };
    let spec = core::builtin_scenario(scenario, &ov).map_err(to_py)?;
    let (ds, truth) = core::gen_scenario(&spec).map_err(to_py)?;
    Ok((PyDataset { inner: ds }, PyGroundTruth { inner: truth }))
}

/// Fit the model by variational EM; the GIL is released while fitting.
/// `init` is `"pooled"` or `"structured"`.
#[pyfunction]
#[pyo3(signature = (dataset, q, qs, max_iters=500, rel_tol=1e-6, seed=0, init="pooled"))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    dataset: &PyDataset,
    q: usize,
    qs: PerStudy,
    max_iters: usize,
    rel_tol: f64,
    seed: u64,
    init: &str,
) -> PyResult<PyFitResult> {
    let ds = &dataset.inner;
    let mut cfg = FitConfig::new(q, qs.expand(ds.num_studies()))
        .with_max_iters(max_iters)
        .with_rel_tol(rel_tol)
        .with_seed(seed);
    cfg.init_method = match init {
        "pooled" => InitMethod::Pooled,
        "structured" => InitMethod::Structured,
        other => {
            return Err(PyValueError::new_err(format!(
                "init must be \"pooled\" or \"structured\", got {other:?}"
            )))
        }
    };
    let res = py.detach(|| core::fit(ds, &cfg)).map_err(to_py)?;
    Ok(PyFitResult { inner: res })
}

/// Two-stage singular value ratio selection; returns a dict with `q`, `qs`
/// and the per-modality choices.
#[pyfunction]
#[pyo3(signature = (dataset, q_max=15, qs_max=PerStudy::One(6), max_iters=500, rel_tol=1e-6))]
fn select_factors<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    q_max: usize,
    qs_max: PerStudy,
    max_iters: usize,
    rel_tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let ds = &dataset.inner;
    let qs_max = qs_max.expand(ds.num_studies());
    let base = FitConfig::new(q_max, qs_max.clone())
        .with_max_iters(max_iters)
        .with_rel_tol(rel_tol);
    let sel = py
        .detach(|| core::select_factors(ds, q_max, &qs_max, &base))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("q", sel.q_hat)?;
    d.set_item("qs", sel.qs_hat)?;
    d.set_item("per_modality_q", sel.per_modality_q)?;
    d.set_item("per_modality_qs", sel.per_modality_qs)?;
    Ok(d)
}

/// Share of the energy of `truth` inside the column space of `estimate`.
#[pyfunction]
fn trace_stat(estimate: PyReadonlyArray2<'_, f64>, truth: PyReadonlyArray2<'_, f64>) -> PyResult<f64> {
    core::trace_stat(&matrix(&estimate), &matrix(&truth)).map_err(to_py)
}

/// One-based position of the largest consecutive singular value ratio.
#[pyfunction]
fn svr(loadings: PyReadonlyArray2<'_, f64>, kmax: usize) -> PyResult<usize> {
    core::svr(&matrix(&loadings), kmax).map_err(to_py)
}

/// Load a dataset from its directory or manifest file.
#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<PyDataset> {
    let manifest = if path.is_dir() {
        path.join(core::io::DATASET_MANIFEST)
    } else {
        path
    };
    Ok(PyDataset {
        inner: core::load_dataset(&manifest).map_err(to_py)?,
    })
}

#[pyfunction]
fn load_fit(dir: PathBuf) -> PyResult<PyFitResult> {
    Ok(PyFitResult {
        inner: core::load_fit(&dir).map_err(to_py)?,
    })
}

#[pyfunction]
fn load_truth(dir: PathBuf) -> PyResult<PyGroundTruth> {
    Ok(PyGroundTruth {
        inner: core::load_truth(&dir).map_err(to_py)?,
    })
}

#[pymodule]
fn mmgfm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyGroundTruth>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(select_factors, m)?)?;
    m.add_function(wrap_pyfunction!(trace_stat, m)?)?;
    m.add_function(wrap_pyfunction!(svr, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_fit, m)?)?;
    m.add_function(wrap_pyfunction!(load_truth, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
