//! Exact and K-step-gradient outer iterations with trajectory recording.
//!
//! Both solvers drive the iteration `theta_{t+1} ~ argmin_w H(theta_t, w)`.
//! The exact solver uses the objective's closed-form minimizer when it has
//! one and otherwise runs inner gradient descent to tolerance; the gradient
//! solver performs exactly K inner steps `w <- w - alpha grad_w H(theta, w)`
//! seeded at `w = theta`, with `alpha = 1/L` by default.
//!
//! Divergence is a first-class outcome, reported through the trajectory's
//! `diverged` flag rather than an error.

use nalgebra::DVector;

use crate::objective::{estimate_constants, Objective, ProbeBox};
use crate::{Error, Result};

/// Hard cap on inner iterations of the generic exact solve.
pub const INNER_ITERATION_CAP: usize = 1_000_000;

/// Distances below this floor make ratios meaningless and end ratio recording.
pub const DISTANCE_FLOOR: f64 = 1e-14;

/// Outer/inner iteration budget, step size, and stopping thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Outer iteration count T.
    pub outer_steps: usize,
    /// Inner gradient steps K per outer iteration (gradient solver only).
    pub inner_steps: usize,
    /// Inner step size; defaults to 1/L when the objective provides L.
    pub alpha: Option<f64>,
    /// Gradient-norm tolerance of the generic exact inner solve.
    pub inner_tol: f64,
    /// Iterate-norm ceiling that flags divergence.
    pub divergence_guard: f64,
    /// Outer stop: `||theta_{t+1} - theta_t|| < step_tol` declares convergence.
    pub step_tol: f64,
    /// Outer stop: fixed-point gradient residual below this declares convergence.
    pub grad_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_steps: 1000,
            inner_steps: 1,
            alpha: None,
            inner_tol: 1e-12,
            divergence_guard: 1e12,
            step_tol: 1e-10,
            grad_tol: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.outer_steps < 1 {
            problems.push("T must be at least 1".to_string());
        }
        if self.inner_steps < 1 {
            problems.push("K must be at least 1".to_string());
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                problems.push(format!("alpha must be positive, got {a}"));
            }
        }
        for (name, v) in [
            ("inner_tol", self.inner_tol),
            ("divergence_guard", self.divergence_guard),
            ("step_tol", self.step_tol),
            ("grad_tol", self.grad_tol),
        ] {
            if !(v > 0.0) {
                problems.push(format!("{name} must be positive, got {v}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(problems.join("; ")))
        }
    }
}

/// Recorded outer iterates with distances to the fixed point (when known),
/// per-step distance ratios, and fixed-point gradient residuals.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub thetas: Vec<DVector<f64>>,
    /// `||theta_t - theta*||` per iterate, when `theta*` was supplied.
    pub distances: Option<Vec<f64>>,
    /// `||grad_w H(theta_t, theta_t)||` per iterate.
    pub grad_residuals: Vec<f64>,
    pub diverged: bool,
    pub converged: bool,
    /// Step size actually used (gradient solver).
    pub alpha_used: Option<f64>,
    /// Whether the step size equals 1/L for the objective's known L. `false`
    /// means the run sits outside the hypothesis of the K-step contraction
    /// bound and reports should flag it.
    pub alpha_is_one_over_l: Option<bool>,
}

impl Trajectory {
    /// Ratio `distances[t+1] / distances[t]`, defined only where the
    /// denominator exceeds [`DISTANCE_FLOOR`].
    pub fn ratio_at(&self, t: usize) -> Option<f64> {
        let d = self.distances.as_ref()?;
        if t + 1 >= d.len() || d[t] <= DISTANCE_FLOOR {
            return None;
        }
        Some(d[t + 1] / d[t])
    }

    /// All defined per-step ratios, in order.
    pub fn ratios(&self) -> Vec<f64> {
        match &self.distances {
            None => Vec::new(),
            Some(d) => (0..d.len().saturating_sub(1))
                .filter_map(|t| self.ratio_at(t))
                .collect(),
        }
    }

    pub fn final_theta(&self) -> &DVector<f64> {
        self.thetas.last().expect("trajectory always holds theta_0")
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }
}

/// `||grad_w H(theta, theta)||`: the fixed-point residual of Eq.-style
/// characterization `grad_w H(theta*, theta*) = 0`.
pub fn fixed_point_residual(obj: &dyn Objective, theta: &DVector<f64>) -> f64 {
    obj.grad_w(theta, theta).norm()
}

fn step_size(obj: &dyn Objective, cfg: &SolverConfig) -> Result<(f64, Option<bool>)> {
    let l = match obj.smoothness() {
        Some(l) if l > 0.0 => Some(l),
        _ => None,
    };
    match (cfg.alpha, l) {
        (Some(a), Some(l)) => Ok((a, Some((a * l - 1.0).abs() < 1e-12))),
        (Some(a), None) => Ok((a, None)),
        (None, Some(l)) => Ok((1.0 / l, Some(true))),
        (None, None) => {
            // No analytic L: fall back to a sampled estimate.
            let est = estimate_constants(obj, ProbeBox::default(), 200, 0)?;
            if !(est.l > 0.0) {
                return Err(Error::InvalidParameter(
                    "cannot pick a step size: estimated L is not positive".to_string(),
                ));
            }
            Ok((1.0 / est.l, None))
        }
    }
}

struct Recorder {
    thetas: Vec<DVector<f64>>,
    distances: Option<Vec<f64>>,
    grad_residuals: Vec<f64>,
    theta_star: Option<DVector<f64>>,
}

impl Recorder {
    fn new(obj: &dyn Objective, theta0: &DVector<f64>, theta_star: Option<&DVector<f64>>) -> Self {
        let mut rec = Recorder {
            thetas: Vec::new(),
            distances: theta_star.map(|_| Vec::new()),
            grad_residuals: Vec::new(),
            theta_star: theta_star.cloned(),
        };
        rec.push(obj, theta0.clone());
        rec
    }

    fn push(&mut self, obj: &dyn Objective, theta: DVector<f64>) {
        self.grad_residuals.push(fixed_point_residual(obj, &theta));
        if let (Some(distances), Some(star)) = (&mut self.distances, &self.theta_star) {
            distances.push((&theta - star).norm());
        }
        self.thetas.push(theta);
    }

    fn finish(self, diverged: bool, converged: bool) -> Trajectory {
        Trajectory {
            thetas: self.thetas,
            distances: self.distances,
            grad_residuals: self.grad_residuals,
            diverged,
            converged,
            alpha_used: None,
            alpha_is_one_over_l: None,
        }
    }
}

fn check_setup(
    obj: &dyn Objective,
    theta0: &DVector<f64>,
    cfg: &SolverConfig,
    theta_star: Option<&DVector<f64>>,
) -> Result<()> {
    cfg.validate()?;
    if theta0.len() != obj.dim() {
        return Err(Error::DimensionMismatch(format!(
            "theta0 has length {}, objective dimension is {}",
            theta0.len(),
            obj.dim()
        )));
    }
    if let Some(star) = theta_star {
        if star.len() != obj.dim() {
            return Err(Error::DimensionMismatch(format!(
                "theta_star has length {}, objective dimension is {}",
                star.len(),
                obj.dim()
            )));
        }
    }
    Ok(())
}

fn blown_up(theta: &DVector<f64>, guard: f64) -> bool {
    theta.iter().any(|x| !x.is_finite()) || theta.norm() > guard
}

/// Exact per-iteration minimization (`theta_{t+1} <- argmin_w H(theta_t, w)`).
///
/// Quadratic objectives use their closed-form minimizer; everything else runs
/// inner gradient descent until the inner gradient norm falls below
/// `cfg.inner_tol` (strong convexity makes this terminate), erroring out past
/// [`INNER_ITERATION_CAP`] iterations.
pub fn solve_exact(
    obj: &dyn Objective,
    theta0: &DVector<f64>,
    cfg: &SolverConfig,
    theta_star: Option<&DVector<f64>>,
) -> Result<Trajectory> {
    check_setup(obj, theta0, cfg, theta_star)?;
    let mut rec = Recorder::new(obj, theta0, theta_star);
    let mut diverged = false;
    let mut converged = false;

    // Inner step size for the generic fallback, resolved lazily.
    let mut fallback_alpha: Option<f64> = None;

    for t in 0..cfg.outer_steps {
        let theta = rec.thetas.last().expect("nonempty").clone();
        if rec.grad_residuals.last().copied().unwrap_or(f64::INFINITY) < cfg.grad_tol {
            converged = true;
            break;
        }
        let next = match obj.argmin_w(&theta) {
            Some(w) => w,
            None => {
                let alpha = match fallback_alpha {
                    Some(a) => a,
                    None => {
                        let (a, _) = step_size(obj, cfg)?;
                        fallback_alpha = Some(a);
                        a
                    }
                };
                let mut w = theta.clone();
                let mut iterations = 0usize;
                loop {
                    let g = obj.grad_w(&theta, &w);
                    if g.norm() < cfg.inner_tol {
                        break;
                    }
                    if iterations >= INNER_ITERATION_CAP {
                        return Err(Error::InnerSolveStalled {
                            cap: INNER_ITERATION_CAP,
                            step: t,
                        });
                    }
                    w -= alpha * g;
                    iterations += 1;
                    if blown_up(&w, cfg.divergence_guard) {
                        break;
                    }
                }
                w
            }
        };
        let step = (&next - &theta).norm();
        rec.push(obj, next);
        if blown_up(rec.thetas.last().expect("nonempty"), cfg.divergence_guard) {
            diverged = true;
            break;
        }
        if step < cfg.step_tol {
            converged = true;
            break;
        }
    }
    Ok(rec.finish(diverged, converged))
}

/// K inner gradient steps per outer iteration, seeded at `w = theta_t`:
///
/// ```text
/// w_0 <- theta_t;  w_{k+1} <- w_k - alpha grad_w H(theta_t, w_k);  theta_{t+1} <- w_K
/// ```
///
/// Non-finite iterates set the `diverged` flag rather than raising an error.
pub fn solve_gradient(
    obj: &dyn Objective,
    theta0: &DVector<f64>,
    cfg: &SolverConfig,
    theta_star: Option<&DVector<f64>>,
) -> Result<Trajectory> {
    check_setup(obj, theta0, cfg, theta_star)?;
    let (alpha, alpha_is_one_over_l) = step_size(obj, cfg)?;
    let mut rec = Recorder::new(obj, theta0, theta_star);
    let mut diverged = false;
    let mut converged = false;

    for _ in 0..cfg.outer_steps {
        let theta = rec.thetas.last().expect("nonempty").clone();
        if rec.grad_residuals.last().copied().unwrap_or(f64::INFINITY) < cfg.grad_tol {
            converged = true;
            break;
        }
        let mut w = theta.clone();
        for _ in 0..cfg.inner_steps {
            let g = obj.grad_w(&theta, &w);
            w -= alpha * g;
            if w.iter().any(|x| !x.is_finite()) {
                break;
            }
        }
        let step = (&w - &theta).norm();
        rec.push(obj, w);
        if blown_up(rec.thetas.last().expect("nonempty"), cfg.divergence_guard) {
            diverged = true;
            break;
        }
        if step < cfg.step_tol {
            converged = true;
            break;
        }
    }
    let mut traj = rec.finish(diverged, converged);
    traj.alpha_used = Some(alpha);
    traj.alpha_is_one_over_l = alpha_is_one_over_l;
    Ok(traj)
}
