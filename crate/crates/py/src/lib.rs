//! Python bindings: the main types and operations of the laboratory exposed
//! as a `tdlab_py` extension module. Vectors and matrices cross the boundary
//! as plain lists / nested lists of floats.
#![cfg(feature = "python")]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use tdlab::analysis;
use tdlab::linear;
use tdlab::mrp;
use tdlab::objective::{self, Objective};
use tdlab::solver;

fn err(e: tdlab::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn from_vector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().cloned().collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix must be nonempty"));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// A finite Markov reward process.
#[pyclass(name = "Mrp")]
struct PyMrp {
    inner: mrp::Mrp,
}

#[pymethods]
impl PyMrp {
    #[new]
    fn new(p: Vec<Vec<f64>>, r: Vec<f64>, gamma: f64, terminal: Vec<bool>) -> PyResult<Self> {
        let transition = to_matrix(&p)?;
        let inner = mrp::Mrp::new(transition, to_vector(&r), gamma, terminal).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    fn bellman_apply(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(from_vector(
            &self.inner.bellman_apply(&to_vector(&v)).map_err(err)?,
        ))
    }

    fn true_values(&self) -> PyResult<Vec<f64>> {
        Ok(from_vector(&self.inner.true_values().map_err(err)?))
    }

    /// Stationary distribution of the chain; `restart` is required when the
    /// chain has terminal states.
    #[pyo3(signature = (restart=None))]
    fn stationary_distribution(&self, restart: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
        let restart = match restart {
            None => None,
            Some(r) => Some(mrp::UpdateDistribution::from_slice(&r).map_err(err)?),
        };
        let d = self
            .inner
            .stationary_distribution(restart.as_ref())
            .map_err(err)?;
        Ok(from_vector(d.weights()))
    }
}

/// The assembled linear system: force matrices, iteration matrix, offset,
/// and fixed point.
#[pyclass(name = "LinearSystem")]
struct PyLinearSystem {
    inner: linear::LinearTdSystem,
}

#[pymethods]
impl PyLinearSystem {
    #[getter]
    fn mw(&self) -> Vec<Vec<f64>> {
        from_matrix(self.inner.mw())
    }

    #[getter]
    fn mtheta(&self) -> Vec<Vec<f64>> {
        from_matrix(self.inner.mtheta())
    }

    #[getter]
    fn iteration_matrix(&self) -> Vec<Vec<f64>> {
        from_matrix(self.inner.iteration_matrix())
    }

    #[getter]
    fn b(&self) -> Vec<f64> {
        from_vector(self.inner.offset())
    }

    #[getter]
    fn theta_star(&self) -> Vec<f64> {
        from_vector(self.inner.theta_star())
    }

    fn grad_w(&self, theta: Vec<f64>, w: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(from_vector(
            &self
                .inner
                .grad_w(&to_vector(&theta), &to_vector(&w))
                .map_err(err)?,
        ))
    }

    fn exact_step(&self, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(from_vector(
            &self.inner.exact_step(&to_vector(&theta)).map_err(err)?,
        ))
    }

    /// Returns `(converges, rho)`.
    fn predict_convergence(&self) -> PyResult<(bool, f64)> {
        let pred = self.inner.predict_convergence().map_err(err)?;
        Ok((pred.converges, pred.rho))
    }
}

/// Objective wrapper shared between Python handles.
#[derive(Clone)]
struct Shared(Arc<dyn Objective>);

impl Objective for Shared {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn value(&self, theta: &DVector<f64>, w: &DVector<f64>) -> f64 {
        self.0.value(theta, w)
    }
    fn grad_w(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.0.grad_w(theta, w)
    }
    fn analytic_constants(&self) -> Option<objective::ForceConstants> {
        self.0.analytic_constants()
    }
    fn smoothness(&self) -> Option<f64> {
        self.0.smoothness()
    }
    fn argmin_w(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        self.0.argmin_w(theta)
    }
}

/// A two-argument objective `H(theta, w)`.
#[pyclass(name = "Objective")]
struct PyObjective {
    inner: Shared,
}

#[pymethods]
impl PyObjective {
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, theta: Vec<f64>, w: Vec<f64>) -> f64 {
        self.inner.value(&to_vector(&theta), &to_vector(&w))
    }

    fn grad_w(&self, theta: Vec<f64>, w: Vec<f64>) -> Vec<f64> {
        from_vector(&self.inner.grad_w(&to_vector(&theta), &to_vector(&w)))
    }

    /// Closed-form `(F_theta, F_w, L, eta, kappa)` when available.
    fn constants(&self) -> Option<(f64, f64, f64, f64, f64)> {
        self.inner
            .analytic_constants()
            .map(|c| (c.f_theta, c.f_w, c.l, c.eta, c.kappa))
    }

    /// Sampled `(F_theta, F_w, L)` bounds over `[lo, hi]^m` probes.
    #[pyo3(signature = (samples=1000, seed=0, lo=-10.0, hi=10.0))]
    fn estimate_constants(
        &self,
        samples: usize,
        seed: u64,
        lo: f64,
        hi: f64,
    ) -> PyResult<(f64, f64, f64)> {
        let probe = objective::ProbeBox::new(lo, hi).map_err(err)?;
        let est = objective::estimate_constants(&self.inner, probe, samples, seed).map_err(err)?;
        Ok((est.f_theta, est.f_w, est.l))
    }
}

/// A recorded solver run.
#[pyclass(name = "Trajectory")]
struct PyTrajectory {
    #[pyo3(get)]
    thetas: Vec<Vec<f64>>,
    #[pyo3(get)]
    distances: Option<Vec<f64>>,
    #[pyo3(get)]
    ratios: Vec<f64>,
    #[pyo3(get)]
    grad_residuals: Vec<f64>,
    #[pyo3(get)]
    diverged: bool,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    alpha_used: Option<f64>,
}

impl From<solver::Trajectory> for PyTrajectory {
    fn from(t: solver::Trajectory) -> Self {
        Self {
            thetas: t.thetas.iter().map(from_vector).collect(),
            distances: t.distances.clone(),
            ratios: t.ratios(),
            grad_residuals: t.grad_residuals.clone(),
            diverged: t.diverged,
            converged: t.converged,
            alpha_used: t.alpha_used,
        }
    }
}

fn build_parts(
    phi: Vec<Vec<f64>>,
    d: Vec<f64>,
) -> PyResult<(linear::FeatureMap, mrp::UpdateDistribution)> {
    let phi = linear::FeatureMap::new(to_matrix(&phi)?).map_err(err)?;
    let d = mrp::UpdateDistribution::from_slice(&d).map_err(err)?;
    Ok((phi, d))
}

/// Assembles the linear system `Mw, Mtheta, A, b, theta*`.
#[pyfunction]
fn build_system(m: &PyMrp, phi: Vec<Vec<f64>>, d: Vec<f64>) -> PyResult<PyLinearSystem> {
    let (phi, d) = build_parts(phi, d)?;
    Ok(PyLinearSystem {
        inner: linear::build_system(&m.inner, &phi, &d).map_err(err)?,
    })
}

/// Quadratic objective `1/2 ||R + gamma P Phi theta - Phi w||_D^2`.
#[pyfunction]
fn quadratic_objective(m: &PyMrp, phi: Vec<Vec<f64>>, d: Vec<f64>) -> PyResult<PyObjective> {
    let (phi, d) = build_parts(phi, d)?;
    let obj = objective::quadratic_linear(&m.inner, &phi, &d).map_err(err)?;
    Ok(PyObjective {
        inner: Shared(Arc::new(obj)),
    })
}

/// Huber objective on the per-state TD residual.
#[pyfunction]
fn huber_objective(
    m: &PyMrp,
    phi: Vec<Vec<f64>>,
    d: Vec<f64>,
    delta: f64,
) -> PyResult<PyObjective> {
    let (phi, d) = build_parts(phi, d)?;
    let obj = objective::huber_linear(&m.inner, &phi, &d, delta).map_err(err)?;
    Ok(PyObjective {
        inner: Shared(Arc::new(obj)),
    })
}

/// Scaled log-cosh objective on the per-state TD residual.
#[pyfunction]
fn logcosh_objective(
    m: &PyMrp,
    phi: Vec<Vec<f64>>,
    d: Vec<f64>,
    scale: f64,
) -> PyResult<PyObjective> {
    let (phi, d) = build_parts(phi, d)?;
    let obj = objective::logistic_linear(&m.inner, &phi, &d, scale).map_err(err)?;
    Ok(PyObjective {
        inner: Shared(Arc::new(obj)),
    })
}

/// Adds `lam/2 ||w||^2` to an existing objective.
#[pyfunction]
fn ridge(obj: &PyObjective, lam: f64) -> PyResult<PyObjective> {
    let ridged = objective::ridge_regularized(obj.inner.clone(), lam).map_err(err)?;
    Ok(PyObjective {
        inner: Shared(Arc::new(ridged)),
    })
}

#[allow(clippy::too_many_arguments)]
fn solver_config(
    t: usize,
    k: usize,
    alpha: Option<f64>,
    divergence_guard: f64,
) -> solver::SolverConfig {
    solver::SolverConfig {
        outer_steps: t,
        inner_steps: k,
        alpha,
        divergence_guard,
        ..Default::default()
    }
}

/// Exact per-iteration minimization for `T` outer steps.
#[pyfunction]
#[pyo3(signature = (obj, theta0, t=1000, theta_star=None, divergence_guard=1e12))]
fn solve_exact(
    obj: &PyObjective,
    theta0: Vec<f64>,
    t: usize,
    theta_star: Option<Vec<f64>>,
    divergence_guard: f64,
) -> PyResult<PyTrajectory> {
    let star = theta_star.map(|v| to_vector(&v));
    let cfg = solver_config(t, 1, None, divergence_guard);
    let traj =
        solver::solve_exact(&obj.inner, &to_vector(&theta0), &cfg, star.as_ref()).map_err(err)?;
    Ok(traj.into())
}

/// `K` inner gradient steps per outer iteration, `alpha = 1/L` by default.
#[pyfunction]
#[pyo3(signature = (obj, theta0, t=1000, k=1, alpha=None, theta_star=None, divergence_guard=1e12))]
#[allow(clippy::too_many_arguments)]
fn solve_gradient(
    obj: &PyObjective,
    theta0: Vec<f64>,
    t: usize,
    k: usize,
    alpha: Option<f64>,
    theta_star: Option<Vec<f64>>,
    divergence_guard: f64,
) -> PyResult<PyTrajectory> {
    let star = theta_star.map(|v| to_vector(&v));
    let cfg = solver_config(t, k, alpha, divergence_guard);
    let traj = solver::solve_gradient(&obj.inner, &to_vector(&theta0), &cfg, star.as_ref())
        .map_err(err)?;
    Ok(traj.into())
}

/// `sqrt((1 - kappa)^K (1 - eta^2) + eta^2)`.
#[pyfunction]
fn sigma_k(kappa: f64, eta: f64, k: u32) -> f64 {
    analysis::sigma_k(kappa, eta, k)
}

/// Divergence threshold in gamma for the uniform-weight counterexample.
#[pyfunction]
fn gamma_threshold(epsilon: f64) -> f64 {
    analysis::counterexample_gamma_threshold(epsilon)
}

/// Divergence threshold in the first-state weight.
#[pyfunction]
fn d1_threshold(epsilon: f64, gamma: f64) -> f64 {
    analysis::counterexample_d1_threshold(epsilon, gamma)
}

/// The two-state divergence example as `(Mrp, phi, d)`.
#[pyfunction]
fn counterexample(epsilon: f64, gamma: f64, d1: f64) -> PyResult<(PyMrp, Vec<Vec<f64>>, Vec<f64>)> {
    let params = analysis::CounterExampleParams::new(epsilon, gamma, d1).map_err(err)?;
    let (m, phi, d) = analysis::counterexample_build(&params).map_err(err)?;
    Ok((
        PyMrp { inner: m },
        from_matrix(phi.matrix()),
        from_vector(d.weights()),
    ))
}

/// Spectral radius of a square matrix.
#[pyfunction]
fn spectral_radius(a: Vec<Vec<f64>>) -> PyResult<f64> {
    linear::spectral_radius(&to_matrix(&a)?).map_err(err)
}

/// Runs a full JSON experiment document; returns `(trajectory_csv, run_json)`.
#[pyfunction]
fn run_experiment(config_json: &str) -> PyResult<(String, String)> {
    let doc = tdlab::config::ExperimentDoc::from_json(config_json).map_err(err)?;
    let out = tdlab::experiment::run(&doc).map_err(err)?;
    Ok((out.csv, out.json))
}

#[pymodule]
fn tdlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMrp>()?;
    m.add_class::<PyLinearSystem>()?;
    m.add_class::<PyObjective>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(build_system, m)?)?;
    m.add_function(wrap_pyfunction!(quadratic_objective, m)?)?;
    m.add_function(wrap_pyfunction!(huber_objective, m)?)?;
    m.add_function(wrap_pyfunction!(logcosh_objective, m)?)?;
    m.add_function(wrap_pyfunction!(ridge, m)?)?;
    m.add_function(wrap_pyfunction!(solve_exact, m)?)?;
    m.add_function(wrap_pyfunction!(solve_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_k, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(d1_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(counterexample, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_radius, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
