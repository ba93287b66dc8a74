//! Convergence prediction vs. observation: the two-state divergence example
//! with its analytic thresholds, the K-step contraction factor sigma_K,
//! contraction-bound verification, the control Lipschitz-bound check, and a
//! randomized search for update distributions with contractive dynamics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linear::{build_system, FeatureMap};
use crate::mrp::{Mrp, UpdateDistribution};
use crate::objective::{ControlObjective, ForceConstants, Objective};
use crate::solver::Trajectory;
use crate::{Error, Result};

/// The K-inner-step contraction factor
/// `sigma_K = sqrt((1 - kappa)^K (1 - eta^2) + eta^2)`.
///
/// At `eta = 0` this reduces to the plain strongly-convex gradient-descent
/// rate `(1 - kappa)^{K/2}`; as `K -> infinity` it approaches `eta`, the
/// exact-solver factor. `kappa = 0` yields 1: a non-expansion only, with
/// convergence not certified.
pub fn sigma_k(kappa: f64, eta: f64, k: u32) -> f64 {
    ((1.0 - kappa).powi(k as i32) * (1.0 - eta * eta) + eta * eta).sqrt()
}

/// Parameters of the classic two-state divergence example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CounterExampleParams {
    /// Escape probability from the second state into the terminal state.
    pub epsilon: f64,
    pub gamma: f64,
    /// Update weight on the first state; the second state gets `1 - d1`.
    pub d1: f64,
}

impl CounterExampleParams {
    pub fn new(epsilon: f64, gamma: f64, d1: f64) -> Result<Self> {
        let mut problems = Vec::new();
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            problems.push(format!("epsilon = {epsilon} outside (0, 1]"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            problems.push(format!("gamma = {gamma} outside (0, 1)"));
        }
        if !(0.0..1.0).contains(&d1) {
            problems.push(format!("d1 = {d1} outside [0, 1)"));
        }
        if problems.is_empty() {
            Ok(Self { epsilon, gamma, d1 })
        } else {
            Err(Error::InvalidParameter(problems.join("; ")))
        }
    }
}

/// Builds the two-state example: `s1 -> s2` surely, `s2 -> s2` with
/// probability `1 - epsilon` and into the terminal state otherwise, all
/// rewards zero, features `(1, 2, 0)`, weights `(d1, 1 - d1, 0)`.
///
/// The true value function is zero everywhere, so `theta* = 0`.
pub fn counterexample_build(
    params: &CounterExampleParams,
) -> Result<(Mrp, FeatureMap, UpdateDistribution)> {
    let p = DMatrix::from_row_slice(
        3,
        3,
        &[
            0.0,
            1.0,
            0.0,
            0.0,
            1.0 - params.epsilon,
            params.epsilon,
            0.0,
            0.0,
            1.0,
        ],
    );
    let mrp = Mrp::new(p, DVector::zeros(3), params.gamma, vec![false, false, true])?;
    let phi = FeatureMap::new(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 0.0]))?;
    let d = UpdateDistribution::from_slice(&[params.d1, 1.0 - params.d1, 0.0])?;
    Ok((mrp, phi, d))
}

/// Divergence threshold in gamma for the uniform-weight example:
/// exact updates converge iff `gamma < 5 / (6 - 4 epsilon)`.
pub fn counterexample_gamma_threshold(epsilon: f64) -> f64 {
    5.0 / (6.0 - 4.0 * epsilon)
}

/// Divergence threshold in the first-state weight:
/// exact updates converge iff
/// `d1 < (4 - 4 gamma (1 - epsilon)) / (3 + 2 gamma - 4 gamma (1 - epsilon))`.
///
/// The returned value can exceed 1 (small `gamma`), in which case every
/// weighting is safe.
pub fn counterexample_d1_threshold(epsilon: f64, gamma: f64) -> f64 {
    let escape = 4.0 * gamma * (1.0 - epsilon);
    (4.0 - escape) / (3.0 + 2.0 * gamma - escape)
}

/// Outcome of comparing observed per-step ratios against the predicted
/// contraction factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionReport {
    /// `eta` for exact trajectories, `sigma_K` for gradient trajectories.
    pub predicted_sigma: f64,
    /// Largest observed distance ratio; 0 when the trajectory recorded no
    /// usable ratios (e.g. started at the fixed point), making the bound
    /// vacuously satisfied.
    pub max_observed_ratio: f64,
    pub bound_satisfied: bool,
    /// `predicted_sigma - max_observed_ratio`.
    pub margin: f64,
    /// Whether the prediction certifies contraction (`predicted_sigma < 1`).
    /// `kappa = 0` or `eta >= 1` leaves only a non-expansion statement.
    pub certified: bool,
}

/// Checks a recorded trajectory against the contraction bound: `eta` per
/// outer step for exact runs (`inner_steps = None`), `sigma_K` for gradient
/// runs with `K = inner_steps`.
pub fn verify_contraction(
    trajectory: &Trajectory,
    constants: &ForceConstants,
    inner_steps: Option<u32>,
) -> Result<ContractionReport> {
    if trajectory.distances.is_none() {
        return Err(Error::InvalidParameter(
            "trajectory has no distances: solve with theta_star to verify contraction".to_string(),
        ));
    }
    let predicted = match inner_steps {
        None => constants.eta,
        Some(k) => {
            if k < 1 {
                return Err(Error::InvalidParameter("K must be at least 1".to_string()));
            }
            sigma_k(constants.kappa, constants.eta, k)
        }
    };
    let max_observed = trajectory.ratios().into_iter().fold(0.0, f64::max);
    Ok(ContractionReport {
        predicted_sigma: predicted,
        max_observed_ratio: max_observed,
        bound_satisfied: max_observed <= predicted + 1e-8,
        margin: predicted - max_observed,
        certified: predicted < 1.0,
    })
}

/// Result of sampling the Lipschitz ratio of `grad_w H` in the target
/// argument against the analytic bound
/// `gamma E_{s'}[max_a' ||phi(s', a')||^2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzReport {
    pub max_ratio: f64,
    pub bound: f64,
    /// `bound - max_ratio`.
    pub slack: f64,
    pub satisfied: bool,
    pub samples: usize,
}

/// Samples pairs `(theta1, theta2, w)` from `[-10, 10]^m` and verifies that
/// every ratio `||grad_w H(theta1, w) - grad_w H(theta2, w)|| / ||theta1 - theta2||`
/// stays below the control problem's Lipschitz bound. Coincident pairs are
/// resampled.
pub fn control_lipschitz_check(
    objective: &ControlObjective,
    samples: usize,
    rng_seed: u64,
) -> Result<LipschitzReport> {
    if samples == 0 {
        return Err(Error::InvalidParameter(
            "need at least one sample".to_string(),
        ));
    }
    let bound = objective.problem().lipschitz_bound();
    let dim = objective.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let draw = |rng: &mut ChaCha8Rng| DVector::from_fn(dim, |_, _| rng.random_range(-10.0..10.0));
    let mut max_ratio: f64 = 0.0;
    for _ in 0..samples {
        let (theta1, theta2) = loop {
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            if (&a - &b).norm() >= 1e-12 {
                break (a, b);
            }
        };
        let w = draw(&mut rng);
        let diff = objective.grad_w(&theta1, &w) - objective.grad_w(&theta2, &w);
        max_ratio = max_ratio.max(diff.norm() / (&theta1 - &theta2).norm());
    }
    Ok(LipschitzReport {
        max_ratio,
        bound,
        slack: bound - max_ratio,
        satisfied: max_ratio <= bound + 1e-8,
        samples,
    })
}

/// Best update distribution found by randomized search.
#[derive(Debug, Clone)]
pub struct SafeDistributionResult {
    pub best: UpdateDistribution,
    pub rho: f64,
    /// Whether any sampled distribution achieved `rho < 1`.
    pub contractive: bool,
    /// Candidates whose systems were singular and had to be skipped.
    pub skipped: usize,
}

/// Samples `trials` update distributions on the non-terminal simplex
/// (uniform Dirichlet draws, plus the stationary distribution as a seed
/// candidate when computable) and returns the one minimizing the spectral
/// radius of the iteration matrix.
///
/// This is a search heuristic, not an optimizer: systematically identifying
/// the convergent set of distributions is open.
pub fn safe_distribution_search(
    mrp: &Mrp,
    phi: &FeatureMap,
    trials: usize,
    rng_seed: u64,
) -> Result<SafeDistributionResult> {
    if trials == 0 {
        return Err(Error::InvalidParameter(
            "need at least one trial".to_string(),
        ));
    }
    let n = mrp.n();
    let non_terminal: Vec<usize> = mrp.non_terminal_states().collect();
    if non_terminal.is_empty() {
        return Err(Error::InvalidParameter(
            "all states are terminal".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let mut candidates: Vec<UpdateDistribution> = Vec::with_capacity(trials + 1);
    // Seed candidate: the stationary distribution (uniform restart when the
    // chain has terminal states). Skipped if the chain is reducible.
    let uniform_restart = {
        let mut w = DVector::zeros(n);
        for &s in &non_terminal {
            w[s] = 1.0 / non_terminal.len() as f64;
        }
        UpdateDistribution::new(w)?
    };
    let restart = if mrp.terminal().iter().any(|&t| t) {
        Some(&uniform_restart)
    } else {
        None
    };
    if let Ok(stationary) = mrp.stationary_distribution(restart) {
        candidates.push(stationary);
    }
    for _ in 0..trials {
        // Uniform Dirichlet over the non-terminal simplex: normalized unit
        // exponentials.
        let mut w = DVector::zeros(n);
        let mut total = 0.0;
        for &s in &non_terminal {
            let e = -(1.0 - rng.random::<f64>()).ln();
            w[s] = e;
            total += e;
        }
        w /= total;
        candidates.push(UpdateDistribution::new(w)?);
    }

    let mut best: Option<(UpdateDistribution, f64)> = None;
    let mut skipped = 0usize;
    for d in candidates {
        match build_system(mrp, phi, &d) {
            Ok(sys) => {
                let rho = sys.predict_convergence()?.rho;
                if best.as_ref().map(|(_, r)| rho < *r).unwrap_or(true) {
                    best = Some((d, rho));
                }
            }
            Err(Error::SingularOptimizationForce) | Err(Error::SingularFixedPoint) => {
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((best, rho)) => Ok(SafeDistributionResult {
            best,
            rho,
            contractive: rho < 1.0,
            skipped,
        }),
        None => Err(Error::SearchFailed),
    }
}
