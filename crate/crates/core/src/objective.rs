//! Two-argument objectives `H(theta, w)` and their force constants.
//!
//! `theta` is the target parameter held fixed within an outer iteration, `w`
//! the optimization parameter minimized within it. Convergence of the outer
//! iteration hinges on three constants:
//!
//! - `F_theta`: Lipschitz constant of `grad_w H` in the *target* argument,
//! - `F_w`: strong-convexity modulus of `H` in `w`,
//! - `L`: Lipschitz constant of `grad_w H` in `w` (so `F_w <= L`),
//!
//! from which `eta = F_theta / F_w` and `kappa = F_w / L` derive. For the
//! quadratic linear case the constants are available in closed form; for the
//! rest, [`estimate_constants`] produces sampled bounds (not certificates).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linear::{build_system, spectral_radius, FeatureMap, LinearTdSystem};
use crate::mrp::{Mrp, UpdateDistribution};
use crate::{Error, Result};

/// A two-argument objective with value and partial gradient in `w`.
///
/// Implementations must yield finite values on finite inputs and a gradient
/// consistent with finite differences of the value in `w`. Both `theta` and
/// `w` have length [`Objective::dim`]; implementations may panic on
/// mismatched lengths.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, theta: &DVector<f64>, w: &DVector<f64>) -> f64;

    fn grad_w(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;

    /// Closed-form force constants, when the objective admits them.
    fn analytic_constants(&self) -> Option<ForceConstants> {
        None
    }

    /// Closed-form Lipschitz constant of `grad_w H` in `w`, when available.
    /// Used to pick the gradient step size `alpha = 1/L`.
    fn smoothness(&self) -> Option<f64> {
        self.analytic_constants().map(|c| c.l)
    }

    /// Closed-form `argmin_w H(theta, w)`, when the objective admits one.
    fn argmin_w(&self, _theta: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
}

impl Objective for Box<dyn Objective> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, theta: &DVector<f64>, w: &DVector<f64>) -> f64 {
        (**self).value(theta, w)
    }
    fn grad_w(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        (**self).grad_w(theta, w)
    }
    fn analytic_constants(&self) -> Option<ForceConstants> {
        (**self).analytic_constants()
    }
    fn smoothness(&self) -> Option<f64> {
        (**self).smoothness()
    }
    fn argmin_w(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        (**self).argmin_w(theta)
    }
}

/// Validated force constants with the derived ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceConstants {
    /// Lipschitz constant of `grad_w H` in theta (target force).
    pub f_theta: f64,
    /// Strong-convexity modulus in w (optimization force).
    pub f_w: f64,
    /// Lipschitz constant of `grad_w H` in w.
    pub l: f64,
    /// `F_theta / F_w`; the exact-solver contraction factor when below 1.
    pub eta: f64,
    /// `F_w / L`, the inverse condition number, in (0, 1].
    pub kappa: f64,
}

impl ForceConstants {
    pub fn new(f_theta: f64, f_w: f64, l: f64) -> Result<Self> {
        if !(f_w > 0.0 && f_w.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "F_w must be positive, got {f_w}"
            )));
        }
        if !(l >= f_w && l.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "L = {l} must be >= F_w = {f_w}"
            )));
        }
        if !(f_theta >= 0.0 && f_theta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "F_theta must be nonnegative, got {f_theta}"
            )));
        }
        Ok(Self {
            f_theta,
            f_w,
            l,
            eta: f_theta / f_w,
            kappa: f_w / l,
        })
    }

    /// Contraction factor of K inner gradient steps at step size `1/L`:
    /// `sigma_K = sqrt((1 - kappa)^K (1 - eta^2) + eta^2)`.
    pub fn sigma_k(&self, k: u32) -> f64 {
        crate::analysis::sigma_k(self.kappa, self.eta, k)
    }
}

/// Sampled force-constant bounds from [`estimate_constants`]. These are
/// empirical lower bounds on `F_theta` and `L` and an upper bound on `F_w`,
/// not certificates; in particular `f_w` may be zero or negative for
/// objectives that are not strongly convex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceEstimate {
    pub f_theta: f64,
    pub f_w: f64,
    pub l: f64,
    pub samples: usize,
}

impl ForceEstimate {
    /// Converts to validated constants when the estimates qualify.
    pub fn to_constants(&self) -> Result<ForceConstants> {
        ForceConstants::new(self.f_theta, self.f_w, self.l.max(self.f_w))
    }
}

// ---------------------------------------------------------------------------
// Quadratic linear objective
// ---------------------------------------------------------------------------

/// The quadratic linear objective `1/2 ||R + gamma P Phi theta - Phi w||_D^2`
/// with closed-form gradient, minimizer, and force constants.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    system: LinearTdSystem,
    phi: DMatrix<f64>,
    lookahead_features: DMatrix<f64>, // P Phi
    reward: DVector<f64>,
    weights: DVector<f64>,
    gamma: f64,
    constants: ForceConstants,
    mtheta_spectral_radius: f64,
}

/// Builds the quadratic linear objective for an MRP, features, and weights.
pub fn quadratic_linear(
    mrp: &Mrp,
    phi: &FeatureMap,
    d: &UpdateDistribution,
) -> Result<QuadraticObjective> {
    let system = build_system(mrp, phi, d)?;
    // F_theta is the Lipschitz constant of grad_w in theta, i.e. the operator
    // norm (largest singular value) of Mtheta. Mtheta is not symmetric, so
    // its largest eigenvalue modulus is recorded separately rather than used.
    let f_theta = nalgebra::SVD::new(system.mtheta().clone(), false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    let mtheta_rho = spectral_radius(system.mtheta())?;
    let constants = ForceConstants::new(f_theta, system.mw_eig_min(), system.mw_eig_max())?;
    Ok(QuadraticObjective {
        phi: phi.matrix().clone(),
        lookahead_features: mrp.transition() * phi.matrix(),
        reward: mrp.reward().clone(),
        weights: d.weights().clone(),
        gamma: mrp.gamma(),
        system,
        constants,
        mtheta_spectral_radius: mtheta_rho,
    })
}

impl QuadraticObjective {
    pub fn system(&self) -> &LinearTdSystem {
        &self.system
    }

    /// Largest eigenvalue modulus of `Mtheta`. `Mtheta` is nonsymmetric, so
    /// this can differ from the operator norm used as `F_theta`; reports
    /// surface both rather than silently picking one.
    pub fn mtheta_spectral_radius(&self) -> f64 {
        self.mtheta_spectral_radius
    }

    fn residual(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.reward + self.gamma * (&self.lookahead_features * theta) - &self.phi * w
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.system.dim()
    }

    fn value(&self, theta: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let r = self.residual(theta, w);
        0.5 * r
            .iter()
            .zip(self.weights.iter())
            .map(|(x, d)| d * x * x)
            .sum::<f64>()
    }

    fn grad_w(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.system
            .grad_w(theta, w)
            .expect("dimension checked by caller")
    }

    fn analytic_constants(&self) -> Option<ForceConstants> {
        Some(self.constants)
    }

    fn argmin_w(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        Some(
            self.system
                .exact_step(theta)
                .expect("dimension checked by caller"),
        )
    }
}

// ---------------------------------------------------------------------------
// Ridge regularization
// ---------------------------------------------------------------------------

/// `base + lambda/2 ||w||^2`. Shifts `F_w` and `L` up by `lambda` and leaves
/// `F_theta` unchanged. The base must be convex in `w` for the combined
/// objective to be `lambda`-strongly convex; this is the caller's
/// responsibility and is not checked.
#[derive(Debug, Clone)]
pub struct RidgeObjective<O: Objective> {
    base: O,
    lambda: f64,
}

pub fn ridge_regularized<O: Objective>(base: O, lambda: f64) -> Result<RidgeObjective<O>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "ridge lambda must be positive, got {lambda}"
        )));
    }
    Ok(RidgeObjective { base, lambda })
}

impl<O: Objective> RidgeObjective<O> {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn base(&self) -> &O {
        &self.base
    }
}

impl<O: Objective> Objective for RidgeObjective<O> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn value(&self, theta: &DVector<f64>, w: &DVector<f64>) -> f64 {
        self.base.value(theta, w) + 0.5 * self.lambda * w.norm_squared()
    }

    fn grad_w(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.base.grad_w(theta, w) + self.lambda * w
    }

    fn analytic_constants(&self) -> Option<ForceConstants> {
        let base = self.base.analytic_constants()?;
        Some(
            ForceConstants::new(base.f_theta, base.f_w + self.lambda, base.l + self.lambda)
                .expect("shifting valid constants by lambda > 0 keeps them valid"),
        )
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.base.smoothness()? + self.lambda)
    }
}

// ---------------------------------------------------------------------------
// Robust linear losses: Huber and log-cosh
// ---------------------------------------------------------------------------

/// Common state for linear-in-features losses with per-state residuals
/// `rho_s = R_s + gamma (P Phi theta)_s - (Phi w)_s`.
#[derive(Debug, Clone)]
struct LinearResiduals {
    phi: DMatrix<f64>,
    lookahead_features: DMatrix<f64>,
    reward: DVector<f64>,
    weights: DVector<f64>,
    gamma: f64,
    mw_eig_max: f64,
}

impl LinearResiduals {
    fn build(mrp: &Mrp, phi: &FeatureMap, d: &UpdateDistribution) -> Result<Self> {
        phi.validate_for(mrp)?;
        d.validate_for(mrp)?;
        let mut weighted_phi = phi.matrix().clone();
        for (i, mut row) in weighted_phi.row_iter_mut().enumerate() {
            row *= d.weight(i);
        }
        let mw = phi.matrix().transpose() * weighted_phi;
        let mw_eig_max = mw
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            phi: phi.matrix().clone(),
            lookahead_features: mrp.transition() * phi.matrix(),
            reward: mrp.reward().clone(),
            weights: d.weights().clone(),
            gamma: mrp.gamma(),
            mw_eig_max,
        })
    }

    fn residual(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.reward + self.gamma * (&self.lookahead_features * theta) - &self.phi * w
    }

    /// `sum_s d_s loss(rho_s)` and its gradient in `w`, given the scalar loss
    /// and its derivative.
    fn weighted_loss(
        &self,
        theta: &DVector<f64>,
        w: &DVector<f64>,
        loss: impl Fn(f64) -> f64,
    ) -> f64 {
        self.residual(theta, w)
            .iter()
            .zip(self.weights.iter())
            .map(|(rho, d)| d * loss(*rho))
            .sum()
    }

    fn weighted_loss_grad(
        &self,
        theta: &DVector<f64>,
        w: &DVector<f64>,
        loss_derivative: impl Fn(f64) -> f64,
    ) -> DVector<f64> {
        let rho = self.residual(theta, w);
        let coeff = DVector::from_fn(rho.len(), |s, _| -self.weights[s] * loss_derivative(rho[s]));
        self.phi.transpose() * coeff
    }
}

/// Huber loss on the per-state TD residual: quadratic inside `[-delta, delta]`,
/// linear outside. Convex in `w` but not strongly convex, so it is typically
/// paired with ridge regularization.
#[derive(Debug, Clone)]
pub struct HuberObjective {
    inner: LinearResiduals,
    delta: f64,
}

pub fn huber_linear(
    mrp: &Mrp,
    phi: &FeatureMap,
    d: &UpdateDistribution,
    delta: f64,
) -> Result<HuberObjective> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "huber delta must be positive, got {delta}"
        )));
    }
    Ok(HuberObjective {
        inner: LinearResiduals::build(mrp, phi, d)?,
        delta,
    })
}

fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * x.abs() - 0.5 * delta * delta
    }
}

fn huber_derivative(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

impl Objective for HuberObjective {
    fn dim(&self) -> usize {
        self.inner.phi.ncols()
    }

    fn value(&self, theta: &DVector<f64>, w: &DVector<f64>) -> f64 {
        self.inner.weighted_loss(theta, w, |x| huber(x, self.delta))
    }

    fn grad_w(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.inner
            .weighted_loss_grad(theta, w, |x| huber_derivative(x, self.delta))
    }

    fn smoothness(&self) -> Option<f64> {
        // The Huber curvature never exceeds 1, so L <= lambda_max(Phi' D Phi).
        Some(self.inner.mw_eig_max)
    }
}

/// Scaled log-cosh loss `scale^2 log cosh(rho / scale)` on the per-state TD
/// residual: the smooth convex member of the logistic family adopted here.
/// Approaches `rho^2 / 2` for small residuals and `scale |rho|` for large.
#[derive(Debug, Clone)]
pub struct LogCoshObjective {
    inner: LinearResiduals,
    scale: f64,
}

pub fn logistic_linear(
    mrp: &Mrp,
    phi: &FeatureMap,
    d: &UpdateDistribution,
    scale: f64,
) -> Result<LogCoshObjective> {
    if !(scale > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "log-cosh scale must be positive, got {scale}"
        )));
    }
    Ok(LogCoshObjective {
        inner: LinearResiduals::build(mrp, phi, d)?,
        scale,
    })
}

/// `log(cosh(x))` without overflow for large `|x|`.
fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    if a > 20.0 {
        a - std::f64::consts::LN_2 + (-2.0 * a).exp().ln_1p()
    } else {
        a.cosh().ln()
    }
}

impl Objective for LogCoshObjective {
    fn dim(&self) -> usize {
        self.inner.phi.ncols()
    }

    fn value(&self, theta: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let s = self.scale;
        self.inner
            .weighted_loss(theta, w, |x| s * s * ln_cosh(x / s))
    }

    fn grad_w(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let s = self.scale;
        self.inner
            .weighted_loss_grad(theta, w, |x| s * (x / s).tanh())
    }

    fn smoothness(&self) -> Option<f64> {
        // d^2/dx^2 [s^2 log cosh(x/s)] = sech^2(x/s) <= 1.
        Some(self.inner.mw_eig_max)
    }
}

// ---------------------------------------------------------------------------
// Control objective with greedification
// ---------------------------------------------------------------------------

/// Greedification operator applied to the next state's action values inside
/// the bootstrapped target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Greedify {
    /// Hard max over actions (ties resolved toward the lowest action index).
    Max,
    /// Smooth softmax with temperature `tau > 0`, computed as
    /// `tau log(mean_a exp(q_a / tau))`: non-expansive in the sup norm and
    /// approaching the hard max as `tau -> 0`.
    Softmax { tau: f64 },
}

impl Greedify {
    pub fn apply(&self, q: &[f64]) -> f64 {
        match *self {
            Greedify::Max => q.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            Greedify::Softmax { tau } => {
                let top = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mean_exp =
                    q.iter().map(|&x| ((x - top) / tau).exp()).sum::<f64>() / q.len() as f64;
                top + tau * mean_exp.ln()
            }
        }
    }
}

/// A finite prediction-with-greedification problem: state weights `d`, policy
/// `pi(a|s)`, linear action-value features `phi(s, a)`, expected rewards and
/// next-state distributions per state-action pair, and a greedification
/// operator for the bootstrapped target.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    n_states: usize,
    n_actions: usize,
    weights: DVector<f64>,
    policy: DMatrix<f64>,
    q_features: DMatrix<f64>,
    rewards: DVector<f64>,
    transitions: DMatrix<f64>,
    gamma: f64,
    greedify: Greedify,
}

impl ControlProblem {
    /// `q_features`, `rewards`, and `transitions` are indexed by the flat
    /// state-action pair `s * n_actions + a`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        weights: DVector<f64>,
        policy: DMatrix<f64>,
        q_features: DMatrix<f64>,
        rewards: DVector<f64>,
        transitions: DMatrix<f64>,
        gamma: f64,
        greedify: Greedify,
    ) -> Result<Self> {
        let mut violations = Vec::new();
        if n_states == 0 {
            violations.push("state count must be positive".to_string());
        }
        if n_actions == 0 {
            violations.push("action set must be nonempty".to_string());
        }
        if let Greedify::Softmax { tau } = greedify {
            if !(tau > 0.0) {
                violations.push(format!("softmax temperature must be positive, got {tau}"));
            }
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            violations.push(format!("gamma = {gamma} outside (0, 1)"));
        }
        let pairs = n_states * n_actions;
        if weights.len() != n_states {
            violations.push("state weights length mismatch".to_string());
        } else if weights.iter().any(|&x| x < 0.0 || !x.is_finite())
            || weights.iter().sum::<f64>() <= 0.0
        {
            violations.push("state weights must be nonnegative with positive mass".to_string());
        }
        if policy.nrows() != n_states || policy.ncols() != n_actions {
            violations.push("policy shape mismatch".to_string());
        } else {
            for s in 0..n_states {
                let row = policy.row(s);
                if row.iter().any(|&x| x < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    violations.push(format!("policy row {s} is not on the simplex"));
                }
            }
        }
        if q_features.nrows() != pairs {
            violations.push("q-feature row count must be n_states * n_actions".to_string());
        }
        if rewards.len() != pairs {
            violations.push("reward length must be n_states * n_actions".to_string());
        }
        if transitions.nrows() != pairs || transitions.ncols() != n_states {
            violations
                .push("transition shape must be (n_states * n_actions) x n_states".to_string());
        } else {
            for sa in 0..pairs {
                let row = transitions.row(sa);
                if row.iter().any(|&x| x < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    violations.push(format!("transition row {sa} is not a distribution"));
                }
            }
        }
        if !violations.is_empty() {
            return Err(Error::InvalidModel(violations));
        }
        // Normalize the state weights; the control objective treats d as a
        // distribution.
        let total: f64 = weights.iter().sum();
        Ok(Self {
            n_states,
            n_actions,
            weights: weights / total,
            policy,
            q_features,
            rewards,
            transitions,
            gamma,
            greedify,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_features(&self) -> usize {
        self.q_features.ncols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn greedify(&self) -> Greedify {
        self.greedify
    }

    fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    /// Greedified next-state values `g(q(s', ., theta))` for every state.
    fn greedy_values(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut q_row = vec![0.0; self.n_actions];
        DVector::from_fn(self.n_states, |s2, _| {
            for (a, q) in q_row.iter_mut().enumerate() {
                *q = self.q_features.row(self.pair(s2, a)).transpose().dot(theta);
            }
            self.greedify.apply(&q_row)
        })
    }

    /// The appendix bound on the Lipschitz constant of `grad_w H` in theta:
    /// `gamma * E_{s'}[max_a' ||phi(s', a')||^2]`, the expectation taken under
    /// the marginal next-state distribution induced by `d` and `pi`.
    pub fn lipschitz_bound(&self) -> f64 {
        let mut marginal = vec![0.0; self.n_states];
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let mass = self.weights[s] * self.policy[(s, a)];
                if mass == 0.0 {
                    continue;
                }
                let row = self.transitions.row(self.pair(s, a));
                for (s2, m) in marginal.iter_mut().enumerate() {
                    *m += mass * row[s2];
                }
            }
        }
        let expected: f64 = marginal
            .iter()
            .enumerate()
            .map(|(s2, &p)| {
                let max_sq = (0..self.n_actions)
                    .map(|a| self.q_features.row(self.pair(s2, a)).norm_squared())
                    .fold(0.0, f64::max);
                p * max_sq
            })
            .sum();
        self.gamma * expected
    }
}

/// The control objective
/// `1/2 sum_s d(s) sum_a pi(a|s) (E_{s'}[r + gamma g(q(s', ., theta))] - q(s, a, w))^2`
/// with linear `q` and greedification operator `g`.
#[derive(Debug, Clone)]
pub struct ControlObjective {
    problem: ControlProblem,
    mw_eig_max: f64,
}

pub fn control_quadratic(problem: ControlProblem) -> Result<ControlObjective> {
    // L = lambda_max(sum_{s,a} d(s) pi(a|s) phi phi'), the curvature of the
    // quadratic in w.
    let m = problem.n_features();
    let mut mw = DMatrix::zeros(m, m);
    for s in 0..problem.n_states {
        for a in 0..problem.n_actions {
            let mass = problem.weights[s] * problem.policy[(s, a)];
            if mass == 0.0 {
                continue;
            }
            let f = problem.q_features.row(problem.pair(s, a)).transpose();
            mw += mass * &f * f.transpose();
        }
    }
    let mw_eig_max = mw
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ControlObjective {
        problem,
        mw_eig_max,
    })
}

impl ControlObjective {
    pub fn problem(&self) -> &ControlProblem {
        &self.problem
    }

    fn targets(&self, theta: &DVector<f64>) -> DVector<f64> {
        let cp = &self.problem;
        let greedy = cp.greedy_values(theta);
        DVector::from_fn(cp.n_states * cp.n_actions, |sa, _| {
            cp.rewards[sa] + cp.gamma * cp.transitions.row(sa).transpose().dot(&greedy)
        })
    }
}

impl Objective for ControlObjective {
    fn dim(&self) -> usize {
        self.problem.n_features()
    }

    fn value(&self, theta: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let cp = &self.problem;
        let targets = self.targets(theta);
        let mut acc = 0.0;
        for s in 0..cp.n_states {
            for a in 0..cp.n_actions {
                let mass = cp.weights[s] * cp.policy[(s, a)];
                if mass == 0.0 {
                    continue;
                }
                let sa = cp.pair(s, a);
                let q_w = cp.q_features.row(sa).transpose().dot(w);
                let diff = targets[sa] - q_w;
                acc += mass * diff * diff;
            }
        }
        0.5 * acc
    }

    fn grad_w(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let cp = &self.problem;
        let targets = self.targets(theta);
        let mut grad = DVector::zeros(cp.n_features());
        for s in 0..cp.n_states {
            for a in 0..cp.n_actions {
                let mass = cp.weights[s] * cp.policy[(s, a)];
                if mass == 0.0 {
                    continue;
                }
                let sa = cp.pair(s, a);
                let f = cp.q_features.row(sa).transpose();
                let q_w = f.dot(w);
                grad += mass * (q_w - targets[sa]) * f;
            }
        }
        grad
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.mw_eig_max)
    }
}

// ---------------------------------------------------------------------------
// Empirical force constants
// ---------------------------------------------------------------------------

/// Probe box for sampling parameters during constant estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeBox {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ProbeBox {
    fn default() -> Self {
        Self {
            lo: -10.0,
            hi: 10.0,
        }
    }
}

impl ProbeBox {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "bad probe box [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    fn sample(&self, rng: &mut impl Rng, dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| rng.random_range(self.lo..self.hi))
    }
}

/// Estimates `F_theta`, `F_w`, and `L` by sampling probe triples:
///
/// - `F_theta` = max of `||grad_w H(theta1, w) - grad_w H(theta2, w)|| / ||theta1 - theta2||`,
/// - `F_w` = min of `<grad_w H(theta, w1) - grad_w H(theta, w2), w1 - w2> / ||w1 - w2||^2`,
/// - `L` = max of `||grad_w H(theta, w1) - grad_w H(theta, w2)|| / ||w1 - w2||`.
///
/// Degenerate probe pairs (distance below 1e-12) are resampled. Requires at
/// least 100 samples.
pub fn estimate_constants(
    obj: &dyn Objective,
    probe_box: ProbeBox,
    samples: usize,
    rng_seed: u64,
) -> Result<ForceEstimate> {
    if samples < 100 {
        return Err(Error::InvalidParameter(format!(
            "constant estimation needs at least 100 samples, got {samples}"
        )));
    }
    let dim = obj.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let distinct_pair = |rng: &mut ChaCha8Rng| loop {
        let a = probe_box.sample(rng, dim);
        let b = probe_box.sample(rng, dim);
        if (&a - &b).norm() >= 1e-12 {
            return (a, b);
        }
    };

    let mut f_theta: f64 = 0.0;
    let mut f_w = f64::INFINITY;
    let mut l: f64 = 0.0;
    for _ in 0..samples {
        let (theta1, theta2) = distinct_pair(&mut rng);
        let w = probe_box.sample(&mut rng, dim);
        let diff = obj.grad_w(&theta1, &w) - obj.grad_w(&theta2, &w);
        f_theta = f_theta.max(diff.norm() / (&theta1 - &theta2).norm());

        let theta = probe_box.sample(&mut rng, dim);
        let (w1, w2) = distinct_pair(&mut rng);
        let dw = &w1 - &w2;
        let dg = obj.grad_w(&theta, &w1) - obj.grad_w(&theta, &w2);
        f_w = f_w.min(dg.dot(&dw) / dw.norm_squared());
        l = l.max(dg.norm() / dw.norm());
    }
    Ok(ForceEstimate {
        f_theta,
        f_w,
        l,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{counterexample_build, CounterExampleParams};
    use crate::gradcheck::max_rel_grad_error;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counterexample(epsilon: f64, gamma: f64) -> (Mrp, FeatureMap, UpdateDistribution) {
        counterexample_build(&CounterExampleParams::new(epsilon, gamma, 0.5).unwrap()).unwrap()
    }

    fn unit_weights() -> UpdateDistribution {
        UpdateDistribution::from_slice(&[1.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn quadratic_constants_on_counterexample() {
        let epsilon = 0.1;
        let gamma = 0.95;
        let (mrp, phi, _) = counterexample(epsilon, gamma);
        let obj = quadratic_linear(&mrp, &phi, &unit_weights()).unwrap();
        let c = obj.analytic_constants().unwrap();
        // Scalar case: all matrix norms coincide.
        assert_relative_eq!(c.f_w, 5.0, epsilon = 1e-12);
        assert_relative_eq!(c.l, 5.0, epsilon = 1e-12);
        assert_relative_eq!(c.f_theta, gamma * (6.0 - 4.0 * epsilon), epsilon = 1e-12);
        assert_relative_eq!(obj.mtheta_spectral_radius(), c.f_theta, epsilon = 1e-12);
    }

    #[test]
    fn tabular_constants_are_weight_extremes() {
        let p =
            nalgebra::DMatrix::from_row_slice(3, 3, &[0.2, 0.5, 0.3, 0.4, 0.4, 0.2, 0.3, 0.3, 0.4]);
        let mrp = Mrp::new(p, DVector::zeros(3), 0.9, vec![false; 3]).unwrap();
        let phi = FeatureMap::new(nalgebra::DMatrix::identity(3, 3)).unwrap();
        let d = UpdateDistribution::from_slice(&[0.2, 0.5, 0.3]).unwrap();
        let c = quadratic_linear(&mrp, &phi, &d)
            .unwrap()
            .analytic_constants()
            .unwrap();
        assert_relative_eq!(c.f_w, 0.2, epsilon = 1e-12);
        assert_relative_eq!(c.l, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_grad_zero_at_fixed_point() {
        let (mrp, phi, d) = counterexample(0.25, 0.9);
        let obj = quadratic_linear(&mrp, &phi, &d).unwrap();
        let star = obj.system().theta_star().clone();
        assert!(obj.grad_w(&star, &star).amax() < 1e-12);
    }

    #[test]
    fn ridge_rejects_nonpositive_lambda() {
        let (mrp, phi, d) = counterexample(0.1, 0.9);
        let obj = quadratic_linear(&mrp, &phi, &d).unwrap();
        assert!(ridge_regularized(obj.clone(), 0.0).is_err());
        assert!(ridge_regularized(obj, -1.0).is_err());
    }

    #[test]
    fn ridge_shifts_constants() {
        let (mrp, phi, d) = counterexample(0.1, 0.9);
        let base = quadratic_linear(&mrp, &phi, &d).unwrap();
        let base_c = base.analytic_constants().unwrap();
        let ridged = ridge_regularized(base, 0.5).unwrap();
        let c = ridged.analytic_constants().unwrap();
        assert_relative_eq!(c.f_w, base_c.f_w + 0.5, epsilon = 1e-12);
        assert_relative_eq!(c.l, base_c.l + 0.5, epsilon = 1e-12);
        assert_relative_eq!(c.f_theta, base_c.f_theta, epsilon = 1e-12);
    }

    #[test]
    fn huber_with_large_delta_matches_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let (mrp, phi, d) = crate::instances::random_instance(&mut rng, 5, 2);
        let quad = quadratic_linear(&mrp, &phi, &d).unwrap();
        let hub = huber_linear(&mrp, &phi, &d, 1e9).unwrap();
        let m = phi.n_features();
        for _ in 0..10 {
            let theta = DVector::from_fn(m, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let w = DVector::from_fn(m, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            assert_relative_eq!(
                hub.value(&theta, &w),
                quad.value(&theta, &w),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn huber_zero_residual_zero_value_and_grad() {
        let (mrp, phi, d) = counterexample(0.1, 0.9);
        let hub = huber_linear(&mrp, &phi, &d, 1.0).unwrap();
        let zero = DVector::zeros(1);
        assert_eq!(hub.value(&zero, &zero), 0.0);
        assert!(hub.grad_w(&zero, &zero).amax() < 1e-15);
    }

    #[test]
    fn huber_rejects_bad_delta() {
        let (mrp, phi, d) = counterexample(0.1, 0.9);
        assert!(huber_linear(&mrp, &phi, &d, 0.0).is_err());
    }

    #[test]
    fn logcosh_zero_residual_zero_value_and_grad() {
        let (mrp, phi, d) = counterexample(0.1, 0.9);
        let obj = logistic_linear(&mrp, &phi, &d, 1.0).unwrap();
        let zero = DVector::zeros(1);
        assert_eq!(obj.value(&zero, &zero), 0.0);
        assert!(obj.grad_w(&zero, &zero).amax() < 1e-15);
    }

    #[test]
    fn logcosh_matches_quadratic_for_small_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let (mrp, phi, d) = crate::instances::random_instance(&mut rng, 5, 2);
        // Residual magnitudes are set by the unit-scale rewards, so this
        // keeps them below scale / 100.
        let scale = 1000.0;
        let quad = quadratic_linear(&mrp, &phi, &d).unwrap();
        let lc = logistic_linear(&mrp, &phi, &d, scale).unwrap();
        let m = phi.n_features();
        // Residuals stay well below scale / 100 for parameters this small.
        for _ in 0..10 {
            let theta = DVector::from_fn(m, |_, _| rng.random::<f64>() * 0.02 - 0.01);
            let w = DVector::from_fn(m, |_, _| rng.random::<f64>() * 0.02 - 0.01);
            let q = quad.value(&theta, &w);
            let l = lc.value(&theta, &w);
            if q > 1e-12 {
                assert!((l - q).abs() / q < 0.01, "logcosh {l} vs quadratic {q}");
            }
        }
    }

    #[test]
    fn logcosh_rejects_bad_scale() {
        let (mrp, phi, d) = counterexample(0.1, 0.9);
        assert!(logistic_linear(&mrp, &phi, &d, -1.0).is_err());
    }

    #[test]
    fn ln_cosh_is_stable_for_large_arguments() {
        assert_relative_eq!(
            ln_cosh(500.0),
            500.0 - std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert!(ln_cosh(1e8).is_finite());
        assert_eq!(ln_cosh(0.0), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let (mrp, phi, d) = crate::instances::random_instance(&mut rng, 6, 3);
        let quad = quadratic_linear(&mrp, &phi, &d).unwrap();
        let hub = huber_linear(&mrp, &phi, &d, 0.7).unwrap();
        let lc = logistic_linear(&mrp, &phi, &d, 1.3).unwrap();
        let ridged = ridge_regularized(huber_linear(&mrp, &phi, &d, 0.7).unwrap(), 0.4).unwrap();
        assert!(max_rel_grad_error(&quad, 20, 101).unwrap() < 1e-5);
        assert!(max_rel_grad_error(&hub, 20, 103).unwrap() < 1e-5);
        assert!(max_rel_grad_error(&lc, 20, 107).unwrap() < 1e-5);
        assert!(max_rel_grad_error(&ridged, 20, 109).unwrap() < 1e-5);
    }

    #[test]
    fn greedify_max_and_softmax_limits() {
        let q = [0.3, 1.7, -0.4];
        assert_eq!(Greedify::Max.apply(&q), 1.7);
        // Small temperature approaches the hard max from below.
        let soft = Greedify::Softmax { tau: 1e-3 }.apply(&q);
        assert!((soft - 1.7).abs() < 1e-2);
        assert!(soft <= 1.7);
        // Softmax output moves continuously with tau.
        let s1 = Greedify::Softmax { tau: 0.5 }.apply(&q);
        let s2 = Greedify::Softmax { tau: 0.6 }.apply(&q);
        assert!(s1 != s2);
    }

    #[test]
    fn control_with_single_action_reduces_to_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let (mrp, phi, d) = crate::instances::random_instance(&mut rng, 4, 2);
        let quad = quadratic_linear(&mrp, &phi, &d).unwrap();

        let n = mrp.n();
        let cp = ControlProblem::new(
            n,
            1,
            d.weights().clone(),
            DMatrix::from_element(n, 1, 1.0),
            phi.matrix().clone(),
            mrp.reward().clone(),
            mrp.transition().clone(),
            mrp.gamma(),
            Greedify::Max,
        )
        .unwrap();
        let ctrl = control_quadratic(cp).unwrap();

        // d is normalized inside ControlProblem, so values agree up to the
        // total weight; also compare at d already normalized.
        let total: f64 = d.weights().iter().sum();
        let m = phi.n_features();
        for _ in 0..10 {
            let theta = DVector::from_fn(m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let w = DVector::from_fn(m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            assert_relative_eq!(
                ctrl.value(&theta, &w) * total,
                quad.value(&theta, &w),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn control_zero_rewards_zero_value_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let mut cp =
            crate::instances::random_control_problem(&mut rng, 3, 2, 2, 0.9, Greedify::Max);
        cp.rewards = DVector::zeros(6);
        let obj = control_quadratic(cp).unwrap();
        let zero = DVector::zeros(2);
        assert_eq!(obj.value(&zero, &zero), 0.0);
    }

    #[test]
    fn control_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        for greedify in [Greedify::Max, Greedify::Softmax { tau: 0.5 }] {
            let cp = crate::instances::random_control_problem(&mut rng, 3, 2, 3, 0.9, greedify);
            let obj = control_quadratic(cp).unwrap();
            assert!(max_rel_grad_error(&obj, 20, 113).unwrap() < 1e-5);
        }
    }

    #[test]
    fn control_rejects_empty_actions_and_bad_tau() {
        let err = ControlProblem::new(
            1,
            0,
            DVector::from_element(1, 1.0),
            DMatrix::zeros(1, 0),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DMatrix::zeros(0, 1),
            0.9,
            Greedify::Max,
        );
        assert!(err.is_err());
        let err = ControlProblem::new(
            1,
            1,
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            0.9,
            Greedify::Softmax { tau: 0.0 },
        );
        assert!(err.is_err());
    }

    #[test]
    fn estimated_constants_match_analytic_on_counterexample() {
        let epsilon = 0.1;
        let gamma = 0.95;
        let (mrp, phi, _) = counterexample(epsilon, gamma);
        let obj = quadratic_linear(&mrp, &phi, &unit_weights()).unwrap();
        let est = estimate_constants(&obj, ProbeBox::default(), 500, 7).unwrap();
        // Scalar case: every sampled ratio equals the constant exactly.
        assert_relative_eq!(est.f_theta, gamma * (6.0 - 4.0 * epsilon), epsilon = 1e-9);
        assert_relative_eq!(est.f_w, 5.0, epsilon = 1e-9);
        assert_relative_eq!(est.l, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn estimated_f_theta_is_zero_for_theta_independent_objective() {
        struct Regression;
        impl Objective for Regression {
            fn dim(&self) -> usize {
                2
            }
            fn value(&self, _theta: &DVector<f64>, w: &DVector<f64>) -> f64 {
                0.5 * w.norm_squared()
            }
            fn grad_w(&self, _theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
                w.clone()
            }
        }
        let est = estimate_constants(&Regression, ProbeBox::default(), 200, 11).unwrap();
        assert_eq!(est.f_theta, 0.0);
        assert_relative_eq!(est.f_w, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn estimated_f_w_reflects_ridge_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let (mrp, phi, d) = crate::instances::random_instance(&mut rng, 4, 2);
        let lambda = 1.0;
        let ridged = ridge_regularized(huber_linear(&mrp, &phi, &d, 0.5).unwrap(), lambda).unwrap();
        let est = estimate_constants(&ridged, ProbeBox::default(), 300, 13).unwrap();
        assert!(
            est.f_w >= lambda - 1e-8,
            "estimated F_w = {} below lambda",
            est.f_w
        );
    }

    #[test]
    fn estimate_requires_enough_samples() {
        let (mrp, phi, d) = counterexample(0.1, 0.9);
        let obj = quadratic_linear(&mrp, &phi, &d).unwrap();
        assert!(estimate_constants(&obj, ProbeBox::default(), 99, 0).is_err());
    }

    #[test]
    fn force_constants_validate_ordering() {
        assert!(ForceConstants::new(1.0, 0.0, 1.0).is_err());
        assert!(ForceConstants::new(1.0, 2.0, 1.0).is_err());
        assert!(ForceConstants::new(-1.0, 1.0, 2.0).is_err());
        let c = ForceConstants::new(0.5, 1.0, 2.0).unwrap();
        assert_relative_eq!(c.eta, 0.5);
        assert_relative_eq!(c.kappa, 0.5);
    }
}
