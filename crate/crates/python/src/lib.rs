//! Python bindings. Functions and certificates cross the boundary as JSON
//! in the same schema the CLI configs use.

use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use stagecraft::cases;
use stagecraft::certificates::DEFAULT_SLACK;
use stagecraft::cmpfn::{kl_decompose, Expr, KInfFn, KLFn, NonnegFn};
use stagecraft::converse::{converse_pipeline, ConverseConfig};
use stagecraft::oracle::{self, FiniteSystem, ViOptions};
use stagecraft::synthesis::{certify_ucc, synthesize, SynthesisParams};
use stagecraft::system::StageCost;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(err)
}

/// A class K-infinity function.
#[pyclass(name = "KInf", module = "stagecraft_py", frozen)]
struct PyKInf(KInfFn);

#[pymethods]
impl PyKInf {
    #[staticmethod]
    fn identity() -> Self {
        PyKInf(KInfFn::identity())
    }

    #[staticmethod]
    fn linear(c: f64) -> PyResult<Self> {
        KInfFn::linear(c).map(PyKInf).map_err(err)
    }

    #[staticmethod]
    fn power(p: f64) -> PyResult<Self> {
        KInfFn::power(p).map(PyKInf).map_err(err)
    }

    /// Piecewise linear through `(0, 0)` and the given points.
    #[staticmethod]
    fn table(points: Vec<(f64, f64)>) -> PyResult<Self> {
        KInfFn::table(points.into_iter().map(|(x, y)| [x, y]).collect())
            .map(PyKInf)
            .map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(PyKInf).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.0)
    }

    fn __call__(&self, r: f64) -> PyResult<f64> {
        self.0.eval(r).map_err(err)
    }

    fn invert(&self, y: f64) -> PyResult<f64> {
        self.0.invert(y).map_err(err)
    }

    fn inverse(&self) -> Self {
        PyKInf(self.0.inverse())
    }

    fn compose(&self, inner: &PyKInf) -> Self {
        PyKInf(self.0.compose(&inner.0))
    }

    fn __add__(&self, other: &PyKInf) -> Self {
        PyKInf(self.0.add(&other.0))
    }

    fn __mul__(&self, other: &PyKInf) -> Self {
        PyKInf(self.0.mul(&other.0))
    }

    fn scale(&self, c: f64) -> PyResult<Self> {
        self.0.scale(c).map(PyKInf).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("KInf({:?})", self.0.expr())
    }
}

/// A class KL function.
#[pyclass(name = "KL", module = "stagecraft_py", frozen)]
struct PyKL(KLFn);

#[pymethods]
impl PyKL {
    /// `c * r * theta^t`
    #[staticmethod]
    fn exponential(c: f64, theta: f64) -> PyResult<Self> {
        KLFn::exponential(c, theta).map(PyKL).map_err(err)
    }

    /// `gamma2(theta^t * gamma1(r))`
    #[staticmethod]
    fn separable(gamma2: &PyKInf, theta: f64, gamma1: &PyKInf) -> PyResult<Self> {
        KLFn::separable(gamma2.0.clone(), theta, gamma1.0.clone())
            .map(PyKL)
            .map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(PyKL).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.0)
    }

    fn __call__(&self, r: f64, t: f64) -> PyResult<f64> {
        self.0.eval(r, t).map_err(err)
    }

    /// `(gamma1, gamma2)` with `beta(r, t) <= gamma2(theta^t gamma1(r))`.
    fn decompose(&self, theta: f64) -> PyResult<(PyKInf, PyKInf)> {
        let (g1, g2) = kl_decompose(&self.0, theta).map_err(err)?;
        Ok((PyKInf(g1), PyKInf(g2)))
    }
}

/// Deterministic finite system with integer states and inputs.
#[pyclass(name = "FiniteSystem", module = "stagecraft_py", frozen)]
struct PyFiniteSystem(Arc<FiniteSystem>);

#[pymethods]
impl PyFiniteSystem {
    #[new]
    fn new(transitions: Vec<Vec<usize>>, sigma: Vec<f64>, rho: Vec<f64>) -> PyResult<Self> {
        FiniteSystem::new(transitions, sigma, rho)
            .map(|s| PyFiniteSystem(Arc::new(s)))
            .map_err(err)
    }

    /// `n` states; input 0 stays, input 1 moves one step toward state 0.
    #[staticmethod]
    fn chain(n: usize) -> Self {
        PyFiniteSystem(Arc::new(FiniteSystem::chain(n)))
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.0.n_states()
    }

    /// Optimal values and greedy policy for `q = r = id`, as JSON.
    #[pyo3(signature = (tol = 1e-12, max_iter = 100_000))]
    fn value_iteration(&self, tol: f64, max_iter: usize) -> PyResult<String> {
        let opts = ViOptions { vi_tol: tol, max_iter };
        let vt = oracle::value_iterate(&self.0, &unit_cost(), opts).map_err(err)?;
        let v: Vec<Option<f64>> = vt.v.iter().map(|&x| x.is_finite().then_some(x)).collect();
        to_json(&serde_json::json!({
            "v": v,
            "policy": vt.policy,
            "iterations": vt.iterations,
            "residual": vt.residual,
        }))
    }

    /// Oracle UCC followed by the converse construction; reports whether
    /// the resulting UBgEC certificate verifies on every state.
    #[pyo3(signature = (horizon = 1024))]
    fn converse(&self, horizon: usize) -> PyResult<String> {
        let ell = unit_cost();
        let vt = oracle::value_iterate(&self.0, &ell, ViOptions::default()).map_err(err)?;
        let ucc = oracle::extract_ucc(&vt, &self.0, &ell, 1.0).map_err(err)?;
        let states: Vec<usize> = (0..self.0.n_states()).filter(|&x| vt.v[x].is_finite()).collect();
        let cfg = ConverseConfig {
            horizon,
            ..Default::default()
        };
        let out = converse_pipeline(&ucc, Arc::clone(&self.0), &states, &cfg).map_err(err)?;
        let rep = out
            .cert
            .verify(&*self.0, &states, horizon, DEFAULT_SLACK)
            .map_err(err)?;
        to_json(&serde_json::json!({
            "claims_passed": out.claims.passed(),
            "passed": rep.passed(),
            "worst_margin": rep.worst_margin(),
            "record": out.record(),
        }))
    }
}

fn unit_cost() -> StageCost<FiniteSystem> {
    StageCost::new(
        KInfFn::identity(),
        NonnegFn::new(Expr::identity()).expect("identity is nonnegative"),
    )
}

/// Names of the built-in vector systems.
#[pyfunction]
fn builtin_cases() -> Vec<&'static str> {
    cases::BUILTIN_NAMES.to_vec()
}

/// Synthesizes a stage cost for a built-in case and certifies it on the
/// case's samples. Returns JSON with `alpha_bar`, `passed` and `worst_margin`.
#[pyfunction]
#[pyo3(signature = (name, cq = 1.0, cr = 1.0, theta = None, horizon = 256))]
fn synthesize_builtin(name: &str, cq: f64, cr: f64, theta: Option<f64>, horizon: usize) -> PyResult<String> {
    let case = cases::builtin(name).ok_or_else(|| err(format!("unknown case {name}")))?;
    let mut params = SynthesisParams {
        cq,
        cr,
        ..Default::default()
    };
    params.theta = theta.unwrap_or(case.theta);
    let result = synthesize(&case.ubgec, &params).map_err(err)?;
    let rep = certify_ucc(
        &result,
        &case.ubgec,
        &*case.system,
        &case.samples,
        horizon,
        DEFAULT_SLACK,
    )
    .map_err(err)?;
    to_json(&serde_json::json!({
        "alpha_bar": result.alpha_bar,
        "q": result.ell.q,
        "r": result.ell.r,
        "passed": rep.passed(),
        "worst_margin": rep.worst_margin(),
        "samples": case.samples.len(),
    }))
}

/// Runs the command-line tool with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    stagecraft::cli::main_with(std::iter::once("stagecraft".to_string()).chain(args))
}

#[pymodule]
fn stagecraft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKInf>()?;
    m.add_class::<PyKL>()?;
    m.add_class::<PyFiniteSystem>()?;
    m.add_function(wrap_pyfunction!(builtin_cases, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_builtin, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
