//! Finite Markov reward processes: Bellman machinery, stationary
//! distributions, and ground-truth values.
//!
//! States are indexed `0..n`. Rewards are earned on transitioning *out of* a
//! state. Terminal states self-loop with probability one, carry zero reward,
//! and have value zero by convention; when a chain has terminal states, its
//! stationary distribution is defined by redirecting terminal mass through an
//! explicit restart distribution over the non-terminal states.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Tolerance on row sums of the transition matrix. Rows within this tolerance
/// of 1 are renormalized; anything further off is rejected.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// A finite Markov reward process `<S, R, P, gamma>`.
#[derive(Debug, Clone)]
pub struct Mrp {
    transition: DMatrix<f64>,
    reward: DVector<f64>,
    gamma: f64,
    terminal: Vec<bool>,
}

/// Checks the MRP invariants and returns one message per violation.
///
/// This is the reporting half of construction: [`Mrp::new`] rejects anything
/// this function flags.
pub fn validate_mrp(
    transition: &DMatrix<f64>,
    reward: &DVector<f64>,
    gamma: f64,
    terminal: &[bool],
) -> Vec<String> {
    let mut violations = Vec::new();
    let n = transition.nrows();
    if n == 0 {
        violations.push("state count must be positive".to_string());
        return violations;
    }
    if transition.ncols() != n {
        violations.push(format!(
            "transition matrix is {}x{}, expected square",
            transition.nrows(),
            transition.ncols()
        ));
        return violations;
    }
    if reward.len() != n {
        violations.push(format!(
            "reward vector has length {}, expected {n}",
            reward.len()
        ));
    }
    if terminal.len() != n {
        violations.push(format!(
            "terminal flags have length {}, expected {n}",
            terminal.len()
        ));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        violations.push(format!("gamma = {gamma} outside (0, 1)"));
    }
    for s in 0..n {
        let row = transition.row(s);
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            violations.push(format!("row {s} has a negative or non-finite entry"));
            continue;
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            violations.push(format!("row {s} not stochastic: sums to {sum}"));
        }
    }
    if reward.iter().any(|r| !r.is_finite()) {
        violations.push("reward vector has a non-finite entry".to_string());
    }
    for (s, &t) in terminal.iter().enumerate().take(n) {
        if !t {
            continue;
        }
        if transition.ncols() == n && (transition[(s, s)] - 1.0).abs() > ROW_SUM_TOL {
            violations.push(format!(
                "terminal state {s} does not self-loop with probability 1"
            ));
        }
        if s < reward.len() && reward[s] != 0.0 {
            violations.push(format!("terminal reward nonzero at state {s}"));
        }
    }
    violations
}

impl Mrp {
    /// Builds an MRP, rejecting invalid inputs with the full violation list.
    /// Rows within [`ROW_SUM_TOL`] of stochastic are renormalized exactly.
    pub fn new(
        transition: DMatrix<f64>,
        reward: DVector<f64>,
        gamma: f64,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let violations = validate_mrp(&transition, &reward, gamma, &terminal);
        if !violations.is_empty() {
            return Err(Error::InvalidModel(violations));
        }
        let mut transition = transition;
        for mut row in transition.row_iter_mut() {
            let sum: f64 = row.iter().sum();
            row /= sum;
        }
        Ok(Self {
            transition,
            reward,
            gamma,
            terminal,
        })
    }

    pub fn n(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn reward(&self) -> &DVector<f64> {
        &self.reward
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn terminal(&self) -> &[bool] {
        &self.terminal
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn non_terminal_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n()).filter(|&s| !self.terminal[s])
    }

    /// Applies the Bellman operator: returns `R + gamma * P * v`.
    pub fn bellman_apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "value vector has length {}, expected {}",
                v.len(),
                self.n()
            )));
        }
        Ok(&self.reward + self.gamma * (&self.transition * v))
    }

    /// The unique Bellman fixed point, solved as `(I - gamma P)^-1 R`.
    pub fn true_values(&self) -> Result<DVector<f64>> {
        let n = self.n();
        let system = DMatrix::identity(n, n) - self.gamma * &self.transition;
        let v = system
            .lu()
            .solve(&self.reward)
            .ok_or_else(|| Error::Internal("(I - gamma P) singular".to_string()))?;
        let residual = (&v - self.bellman_apply(&v)?).amax();
        if residual >= 1e-10 {
            return Err(Error::Internal(format!(
                "Bellman fixed-point residual {residual:.3e} exceeds 1e-10"
            )));
        }
        Ok(v)
    }

    /// The redirected transition matrix used for stationary distributions:
    /// every unit of probability that would enter a terminal state is sent
    /// through `restart` instead, so terminal columns are identically zero.
    fn redirected_transition(&self, restart: Option<&UpdateDistribution>) -> Result<DMatrix<f64>> {
        let n = self.n();
        let has_terminal = self.terminal.iter().any(|&t| t);
        let restart_row: Option<DVector<f64>> = if has_terminal {
            let r = restart.ok_or_else(|| {
                Error::InvalidParameter(
                    "chain has terminal states: a restart distribution is required".to_string(),
                )
            })?;
            r.validate_for(self)?;
            Some(r.normalized())
        } else {
            None
        };
        let mut p = DMatrix::zeros(n, n);
        for s in 0..n {
            let mut terminal_mass = 0.0;
            for s2 in 0..n {
                if self.terminal[s2] {
                    terminal_mass += self.transition[(s, s2)];
                } else {
                    p[(s, s2)] = self.transition[(s, s2)];
                }
            }
            if terminal_mass > 0.0 {
                let row = restart_row
                    .as_ref()
                    .expect("terminal mass implies terminal states");
                for s2 in 0..n {
                    p[(s, s2)] += terminal_mass * row[s2];
                }
            }
        }
        Ok(p)
    }

    /// The unique distribution `d` with `d' P~ = d'`, where `P~` is the chain
    /// with terminal mass redirected to `restart`. Entries sum to 1 over the
    /// non-terminal states and are zero at terminal states.
    ///
    /// Fails with [`Error::ReducibleChain`] when the redirected chain does not
    /// have a unique stationary distribution.
    pub fn stationary_distribution(
        &self,
        restart: Option<&UpdateDistribution>,
    ) -> Result<UpdateDistribution> {
        let n = self.n();
        let p = self.redirected_transition(restart)?;

        // d solves (P~' - I) d = 0 with sum(d) = 1. Uniqueness requires the
        // rank of (P~' - I) to be exactly n - 1.
        let system = p.transpose() - DMatrix::identity(n, n);
        let svd = nalgebra::SVD::new(system.clone(), false, false);
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10).count();
        if rank != n - 1 {
            return Err(Error::ReducibleChain);
        }

        let pivot = self
            .non_terminal_states()
            .next()
            .ok_or_else(|| Error::InvalidParameter("all states are terminal".to_string()))?;
        let mut augmented = system;
        for s2 in 0..n {
            augmented[(pivot, s2)] = 1.0;
        }
        let mut rhs = DVector::zeros(n);
        rhs[pivot] = 1.0;
        let mut d = augmented.lu().solve(&rhs).ok_or(Error::ReducibleChain)?;

        for s in 0..n {
            if self.terminal[s] || d[s].abs() < 1e-12 {
                d[s] = 0.0;
            }
        }
        if d.iter().any(|&x| x < 0.0) {
            return Err(Error::ReducibleChain);
        }
        let mass: f64 = d.iter().sum();
        if mass <= 0.0 {
            return Err(Error::ReducibleChain);
        }
        d /= mass;

        let invariance = (&p.transpose() * &d - &d).amax();
        if invariance >= 1e-10 {
            return Err(Error::Internal(format!(
                "stationary invariance residual {invariance:.3e} exceeds 1e-10"
            )));
        }
        UpdateDistribution::new(d)
    }
}

/// Nonnegative state weights used to weight the objective. Not required to
/// sum to 1: every conclusion drawn downstream is invariant to positive
/// rescaling of the weights.
#[derive(Debug, Clone)]
pub struct UpdateDistribution {
    weights: DVector<f64>,
}

impl UpdateDistribution {
    pub fn new(weights: DVector<f64>) -> Result<Self> {
        let mut violations = Vec::new();
        if weights.is_empty() {
            violations.push("weights must be nonempty".to_string());
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            violations.push("weights must be finite and nonnegative".to_string());
        }
        if !weights.iter().any(|&w| w > 0.0) {
            violations.push("at least one weight must be positive".to_string());
        }
        if violations.is_empty() {
            Ok(Self { weights })
        } else {
            Err(Error::InvalidModel(violations))
        }
    }

    pub fn from_slice(weights: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(weights))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn weight(&self, s: usize) -> f64 {
        self.weights[s]
    }

    /// Weights rescaled to sum to 1.
    pub fn normalized(&self) -> DVector<f64> {
        let total: f64 = self.weights.iter().sum();
        &self.weights / total
    }

    /// Checks compatibility with an MRP: matching length and zero weight on
    /// terminal states.
    pub fn validate_for(&self, mrp: &Mrp) -> Result<()> {
        if self.len() != mrp.n() {
            return Err(Error::DimensionMismatch(format!(
                "distribution has length {}, MRP has {} states",
                self.len(),
                mrp.n()
            )));
        }
        for s in 0..mrp.n() {
            if mrp.is_terminal(s) && self.weights[s] != 0.0 {
                return Err(Error::InvalidModel(vec![format!(
                    "weight on terminal state {s} must be 0, got {}",
                    self.weights[s]
                )]));
            }
        }
        Ok(())
    }

    /// Rescales all weights by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "scale must be positive, got {c}"
            )));
        }
        Self::new(&self.weights * c)
    }
}

/// The weighted norm `||v||_D = sqrt(v' D v)` with `D = diag(d)`.
pub fn weighted_norm(v: &DVector<f64>, d: &UpdateDistribution) -> Result<f64> {
    if v.len() != d.len() {
        return Err(Error::DimensionMismatch(format!(
            "vector has length {}, distribution has length {}",
            v.len(),
            d.len()
        )));
    }
    let sq: f64 = v
        .iter()
        .zip(d.weights().iter())
        .map(|(x, w)| w * x * x)
        .sum();
    Ok(sq.sqrt())
}
