use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::Serialize;

use normfim::experiments::{
    predict_only, run_convrate, run_fig1, run_phase_diagram, spectrum_once, write_outputs,
    ExperimentConfig, ExperimentKind, RunOutput,
};
use normfim::fimlab::{reversed_fim_of, spectrum};
use normfim::meanfield::{self, Activation, MeanField, NormMode};
use normfim::netlab::{self, Batch};
use normfim::Error;

fn to_py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 | 3 => PyValueError::new_err(format!("{} ({})", e, e.kind())),
        4 => PyArithmeticError::new_err(format!("{} ({})", e, e.kind())),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Round-trip through JSON into plain Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(&format!("\"{text}\""))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {text:?}")))
}

/// Network architecture and initialization.
#[pyclass(name = "NetSpec", from_py_object)]
#[derive(Clone)]
struct PyNetSpec {
    inner: meanfield::NetSpec,
}

#[pymethods]
impl PyNetSpec {
    #[new]
    #[pyo3(signature = (depth, outputs, activation, sigma_w2, sigma_b2, norm_mode = "none"))]
    fn new(
        depth: usize,
        outputs: usize,
        activation: &str,
        sigma_w2: f64,
        sigma_b2: f64,
        norm_mode: &str,
    ) -> PyResult<Self> {
        let act: Activation = parse("activation", activation)?;
        let mode: NormMode = parse("norm mode", norm_mode)?;
        let inner = meanfield::NetSpec::uniform(depth, outputs, act, sigma_w2, sigma_b2).with_norm(mode);
        inner.validate().map_err(to_py_err)?;
        Ok(PyNetSpec { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: meanfield::NetSpec =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(to_py_err)?;
        Ok(PyNetSpec { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).unwrap()
    }

    fn with_norm(&self, norm_mode: &str) -> PyResult<Self> {
        Ok(PyNetSpec {
            inner: self.inner.clone().with_norm(parse("norm mode", norm_mode)?),
        })
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    #[getter]
    fn outputs(&self) -> usize {
        self.inner.outputs
    }

    #[getter]
    fn norm_mode(&self) -> &'static str {
        self.inner.norm_mode.as_str()
    }

    fn __repr__(&self) -> String {
        format!("NetSpec({})", self.to_json())
    }
}

/// `(kappa1, kappa2)` for the net's activations and variances.
#[pyfunction]
fn kappas(spec: &PyNetSpec) -> PyResult<(f64, f64)> {
    let mf = MeanField::new();
    let p = mf.order_params(&spec.inner).map_err(to_py_err)?;
    let k = mf.kappas(&spec.inner, &p).map_err(to_py_err)?;
    Ok((k.kappa1, k.kappa2))
}

/// Order parameters as a dict of per-layer lists.
#[pyfunction]
fn order_params<'py>(py: Python<'py>, spec: &PyNetSpec) -> PyResult<Bound<'py, PyAny>> {
    let p = MeanField::new().order_params(&spec.inner).map_err(to_py_err)?;
    to_py(py, &p)
}

/// Every applicable prediction at `(m, t)`, one dict per mode.
#[pyfunction]
fn predict<'py>(py: Python<'py>, spec: &PyNetSpec, m: usize, t: usize) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = ExperimentConfig::new(ExperimentKind::PredictOnly, spec.inner.clone());
    cfg.widths = vec![m];
    cfg.batch = Some(normfim::experiments::BatchRule::Fixed { t });
    to_py(py, &predict_only(&cfg).map_err(to_py_err)?)
}

/// A random network at base width `m`.
#[pyclass(name = "Network")]
struct PyNetwork {
    params: netlab::Params,
}

#[pymethods]
impl PyNetwork {
    #[new]
    fn new(spec: &PyNetSpec, m: usize, seed: u64) -> PyResult<Self> {
        let params = netlab::init_params(&spec.inner, m, seed).map_err(to_py_err)?;
        Ok(PyNetwork { params })
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.params.n_params()
    }

    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.params.widths.clone()
    }

    /// Outputs on a Gaussian batch of `t` samples, as `C` lists of `T`.
    fn outputs(&self, t: usize, batch_seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let b = Batch::for_params(&self.params, t, batch_seed);
        let f = netlab::outputs(&self.params, &b, self.params.spec.norm_mode).map_err(to_py_err)?;
        Ok(f.row_iter().map(|r| r.iter().cloned().collect()).collect())
    }

    /// The `CT x CT` reversed FIM as nested lists.
    fn reversed_fim(&self, t: usize, batch_seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let b = Batch::for_params(&self.params, t, batch_seed);
        let f = reversed_fim_of(&self.params, &b, self.params.spec.norm_mode).map_err(to_py_err)?;
        Ok(f.matrix.row_iter().map(|r| r.iter().cloned().collect()).collect())
    }

    /// `m_lambda`, `s_lambda` and `lambda_max` of the FIM.
    #[pyo3(signature = (t, batch_seed, keep_eigenvalues = false))]
    fn spectrum<'py>(
        &self,
        py: Python<'py>,
        t: usize,
        batch_seed: u64,
        keep_eigenvalues: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let b = Batch::for_params(&self.params, t, batch_seed);
        let f = reversed_fim_of(&self.params, &b, self.params.spec.norm_mode).map_err(to_py_err)?;
        to_py(py, &spectrum(&f, keep_eigenvalues).map_err(to_py_err)?)
    }
}

fn run_config(cfg: &ExperimentConfig) -> normfim::Result<RunOutput> {
    Ok(match cfg.kind {
        ExperimentKind::PredictOnly => RunOutput::Predictions(predict_only(cfg)?),
        ExperimentKind::SpectrumOnce => RunOutput::Spectrum(Box::new(spectrum_once(cfg)?)),
        ExperimentKind::Fig1Sharpness => RunOutput::Ensemble(run_fig1(cfg)?),
        ExperimentKind::Convrate => RunOutput::Ensemble(run_convrate(cfg)?),
        ExperimentKind::PhaseDiagram => RunOutput::Phase(run_phase_diagram(cfg)?),
    })
}

/// Run an experiment from a JSON config. With `out`, artifacts are written
/// there as the command-line tool does.
#[pyfunction]
#[pyo3(signature = (config_json, out = None))]
fn run_experiment<'py>(py: Python<'py>, config_json: &str, out: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(to_py_err)?;
    let result = py.detach(|| run_config(&cfg)).map_err(to_py_err)?;
    if let Some(dir) = out {
        write_outputs(std::path::Path::new(dir), &cfg, &result).map_err(to_py_err)?;
    }
    to_py(py, &result)
}

#[pymodule]
fn normfim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetSpec>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(kappas, m)?)?;
    m.add_function(wrap_pyfunction!(order_params, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
