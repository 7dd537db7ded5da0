//! Python bindings for the `nsstab` core: eigenbasis, Galerkin model,
//! constant packs and the closed-loop experiments. Structured results
//! come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyModule;

use nsstab::cli::{run_subcommand, Subcommand};
use nsstab::config::parse_config;
use nsstab::constants::{estimate_c0, feedback_params, ConstantMode, ConstantPack};
use nsstab::dynamics::{build_trilinear_tensor, simulate, GalerkinModel, LinearFeedback, NoControl};
use nsstab::experiments::{
    random_state, run_null_control, run_rapid_stab, run_small_time, NullControlConfig, RapidStabConfig,
    SmallTimeConfig,
};
use nsstab::grid::{build_grid, DomainSpec, Rect, Region};
use nsstab::spectral::{assemble_gram, assemble_operators, default_lambda_grid, fit_c1, solve_eigenbasis, StokesBasis};

fn err(e: nsstab::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.kind()))
}

fn to_dict<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(PyModule::import(py, "json")?.call_method1("loads", (text,))?.unbind())
}

#[pyclass(name = "StokesBasis", frozen)]
struct PyBasis {
    inner: StokesBasis,
}

#[pymethods]
impl PyBasis {
    #[new]
    #[pyo3(signature = (nx, ny, m, omega, lx = 1.0, ly = 1.0))]
    fn new(nx: usize, ny: usize, m: usize, omega: [f64; 4], lx: f64, ly: f64) -> PyResult<Self> {
        let spec = DomainSpec { lx, ly, nx, ny, omega: Rect::from_array(omega) };
        let grid = build_grid(&spec).map_err(err)?;
        let inner = solve_eigenbasis(&assemble_operators(&grid), &grid, m).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn tau(&self) -> Vec<f64> {
        self.inner.tau.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Smallest eigenvalue of the localized Gram block of the first `n` modes.
    fn gram_lambda_min(&self, n: usize) -> PyResult<f64> {
        assemble_gram(&self.inner, Region::Control)
            .and_then(|g| g.lambda_min(n))
            .map_err(err)
    }

    /// Spectral constant fitted over `τ₁ … τ_{M−4}`; returns the dict form.
    fn fit_c1(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let g = assemble_gram(&self.inner, Region::Control).map_err(err)?;
        let fit = fit_c1(&self.inner, &g, &default_lambda_grid(&self.inner)).map_err(err)?;
        to_dict(py, &fit)
    }
}

#[pyclass(name = "GalerkinModel", frozen)]
struct PyModel {
    inner: GalerkinModel,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(basis: &PyBasis) -> PyResult<Self> {
        let b = &basis.inner;
        let gram = assemble_gram(b, Region::Control).map_err(err)?;
        let inner = GalerkinModel::new(b.tau.clone(), build_trilinear_tensor(b), gram).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// `B(u, v, w)` of the skew-symmetrized tensor.
    fn trilinear(&self, u: Vec<f64>, v: Vec<f64>, w: Vec<f64>) -> PyResult<f64> {
        let m = self.inner.dim();
        if u.len() != m || v.len() != m || w.len() != m {
            return Err(PyValueError::new_err(format!("vectors must have length {m}")));
        }
        Ok(self.inner.tensor.eval(&u, &v, &w))
    }

    /// Right-hand side `−ν A x − N(x) + G c`.
    fn rhs(&self, x: Vec<f64>, c: Vec<f64>) -> PyResult<Vec<f64>> {
        let m = self.inner.dim();
        if x.len() != m || c.len() != m {
            return Err(PyValueError::new_err(format!("vectors must have length {m}")));
        }
        let mut out = vec![0.0; m];
        self.inner.rhs(&x, &c, &mut out);
        Ok(out)
    }

    #[pyo3(signature = (samples = 1000, seed = 42))]
    fn estimate_c0(&self, py: Python<'_>, samples: usize, seed: u64) -> PyResult<Py<PyAny>> {
        let e = estimate_c0(&self.inner.tensor, &self.inner.tau, samples, seed).map_err(err)?;
        to_dict(py, &e)
    }

    /// Free or stationary-feedback run; returns `{"t": [...], "norm": [...],
    /// "dissipation": float}`.
    #[pyo3(signature = (x0, t_end, dt, pack = None, lam = None, stride = 1))]
    fn simulate(
        &self,
        py: Python<'_>,
        x0: Vec<f64>,
        t_end: f64,
        dt: f64,
        pack: Option<&PyPack>,
        lam: Option<f64>,
        stride: usize,
    ) -> PyResult<Py<PyAny>> {
        let traj = match (pack, lam) {
            (Some(p), Some(l)) => {
                let params = feedback_params(l, &p.inner, &self.inner.tau).map_err(err)?;
                let mut ctl = LinearFeedback { params, cutoff: false };
                simulate(&self.inner, &mut ctl, &x0, 0.0, t_end, dt, stride)
            }
            (None, None) => simulate(&self.inner, &mut NoControl, &x0, 0.0, t_end, dt, stride),
            _ => return Err(PyValueError::new_err("give both pack and lam, or neither")),
        }
        .map_err(err)?;
        let out = serde_json::json!({ "t": traj.t, "norm": traj.norm_h(), "dissipation": traj.dissipation });
        to_dict(py, &out)
    }
}

#[pyclass(name = "ConstantPack", frozen)]
struct PyPack {
    inner: ConstantPack,
}

#[pymethods]
impl PyPack {
    #[staticmethod]
    #[pyo3(signature = (c1, c0, lambda_probe = Vec::new()))]
    fn certified(c1: f64, c0: f64, lambda_probe: Vec<f64>) -> PyResult<Self> {
        ConstantPack::certified(c1, c0, &lambda_probe).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn practical(c1: f64, c2: f64, q: f64, c0: f64) -> PyResult<Self> {
        ConstantPack::practical(c1, c2, q, c0).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn c1(&self) -> f64 {
        self.inner.c1
    }
    #[getter]
    fn c0(&self) -> f64 {
        self.inner.c0
    }
    #[getter]
    fn c2(&self) -> f64 {
        self.inner.c2
    }
    #[getter]
    fn q(&self) -> f64 {
        self.inner.q
    }
    #[getter]
    fn c3(&self) -> f64 {
        self.inner.c3
    }
    #[getter]
    fn mode(&self) -> &'static str {
        match self.inner.mode {
            ConstantMode::CertifiedFromFit => "certified-from-fit",
            ConstantMode::Practical => "practical",
        }
    }

    /// `γ_λ, μ_λ, r_λ, N(λ)` for a threshold below the largest retained τ.
    fn feedback(&self, py: Python<'_>, lam: f64, tau: Vec<f64>) -> PyResult<Py<PyAny>> {
        to_dict(py, &feedback_params(lam, &self.inner, &tau).map_err(err)?)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyfunction(name = "random_state")]
fn py_random_state(m: usize, norm: f64, seed: u64) -> Vec<f64> {
    random_state(m, norm, seed)
}

#[pyfunction]
#[pyo3(signature = (model, pack, lam, horizon, dt, y0_scale = 0.5, cutoff = false, seed = 7, sample_stride = 8))]
#[allow(clippy::too_many_arguments)]
fn rapid_stab(
    py: Python<'_>,
    model: &PyModel,
    pack: &PyPack,
    lam: f64,
    horizon: f64,
    dt: f64,
    y0_scale: f64,
    cutoff: bool,
    seed: u64,
    sample_stride: usize,
) -> PyResult<Py<PyAny>> {
    let cfg = RapidStabConfig {
        lambda: lam,
        y0_scale,
        cutoff,
        horizon,
        dt,
        sample_stride,
        seed,
        compare_variants: true,
    };
    to_dict(py, &run_rapid_stab(&model.inner, &pack.inner, &cfg).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (model, pack, n0, n_max, dt, y0_norm = None, eps_zero = 1e-6, seed = 11, cutoff = false))]
#[allow(clippy::too_many_arguments)]
fn null_control(
    py: Python<'_>,
    model: &PyModel,
    pack: &PyPack,
    n0: u32,
    n_max: usize,
    dt: f64,
    y0_norm: Option<f64>,
    eps_zero: f64,
    seed: u64,
    cutoff: bool,
) -> PyResult<Py<PyAny>> {
    let cfg = NullControlConfig { n0, n_max, eps_zero, y0_norm, seed, dt, cutoff, enforce_bounds: false };
    to_dict(py, &run_null_control(&model.inner, &pack.inner, &cfg).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (model, pack, n0, n_max, dt, s_offsets = vec![0.0, 1.0 / 3.0, 0.9], eta_grid = vec![1e-4, 1e-3, 1e-2], y0_norm = None, eps_zero = 1e-6, seed = 5))]
#[allow(clippy::too_many_arguments)]
fn small_time(
    py: Python<'_>,
    model: &PyModel,
    pack: &PyPack,
    n0: u32,
    n_max: usize,
    dt: f64,
    s_offsets: Vec<f64>,
    eta_grid: Vec<f64>,
    y0_norm: Option<f64>,
    eps_zero: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let cfg = SmallTimeConfig { n0, n_max, s_offsets, periods: 2, eps_zero, y0_norm, eta_grid, seed, dt };
    to_dict(py, &run_small_time(&model.inner, &pack.inner, &cfg).map_err(err)?)
}

/// Parses and validates a run config; returns it as a dict.
#[pyfunction(name = "parse_config")]
fn py_parse_config(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    to_dict(py, &parse_config(&path).map_err(err)?)
}

/// Runs a CLI subcommand against a config file; returns its summary text.
#[pyfunction]
fn run(name: &str, config: PathBuf) -> PyResult<String> {
    let cmd: Subcommand = name.parse().map_err(err)?;
    let cfg = parse_config(&config).map_err(err)?;
    run_subcommand(cmd, &cfg).map(|o| o.summary).map_err(err)
}

#[pymodule]
fn nsstab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBasis>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPack>()?;
    m.add_function(wrap_pyfunction!(py_random_state, m)?)?;
    m.add_function(wrap_pyfunction!(rapid_stab, m)?)?;
    m.add_function(wrap_pyfunction!(null_control, m)?)?;
    m.add_function(wrap_pyfunction!(small_time, m)?)?;
    m.add_function(wrap_pyfunction!(py_parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
