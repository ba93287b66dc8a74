//! The quadratic-loss linear-approximation specialization.
//!
//! With features `Phi`, weights `D = diag(d)`, and discount `gamma`, the
//! objective `H(theta, w) = 1/2 ||R + gamma P Phi theta - Phi w||_D^2` has
//! partial gradient
//!
//! ```text
//! grad_w H(theta, w) = Mw w - Mtheta theta - b,
//!     Mw = Phi' D Phi,   Mtheta = gamma Phi' D P Phi,   b = Phi' D R.
//! ```
//!
//! `Mw` is the optimization force, `Mtheta` the target force. Exact
//! per-iteration minimization follows the recurrence
//! `theta_{t+1} - theta* = A (theta_t - theta*)` with iteration matrix
//! `A = Mw^-1 Mtheta`, so the iteration converges iff the spectral radius of
//! `A` is below 1.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::mrp::{Mrp, UpdateDistribution};
use crate::{Error, Result};

/// Singularity threshold on smallest singular values and pivots.
pub const SINGULAR_TOL: f64 = 1e-10;

/// State-feature matrix `Phi` (one row per state, one column per feature).
#[derive(Debug, Clone)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
}

impl FeatureMap {
    /// Requires finite entries and full column rank (smallest singular value
    /// above [`SINGULAR_TOL`]).
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        let mut violations = Vec::new();
        if phi.nrows() == 0 || phi.ncols() == 0 {
            violations.push("feature matrix must be nonempty".to_string());
        } else if phi.iter().any(|x| !x.is_finite()) {
            violations.push("feature matrix has a non-finite entry".to_string());
        } else {
            let svd = nalgebra::SVD::new(phi.clone(), false, false);
            let smallest = svd
                .singular_values
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            if !(smallest > SINGULAR_TOL) {
                violations.push(format!(
                    "feature matrix rank deficient: smallest singular value {smallest:.3e}"
                ));
            }
        }
        if violations.is_empty() {
            Ok(Self { phi })
        } else {
            Err(Error::InvalidModel(violations))
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidModel(vec![
                "feature matrix must be nonempty".into()
            ]));
        }
        let m = rows[0].len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidModel(vec!["ragged feature matrix".into()]));
        }
        let phi = DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]);
        Self::new(phi)
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.phi.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// Checks compatibility with an MRP: matching state count and all-zero
    /// rows at terminal states (whose value is identically zero).
    pub fn validate_for(&self, mrp: &Mrp) -> Result<()> {
        if self.n_states() != mrp.n() {
            return Err(Error::DimensionMismatch(format!(
                "feature matrix has {} rows, MRP has {} states",
                self.n_states(),
                mrp.n()
            )));
        }
        for s in 0..mrp.n() {
            if mrp.is_terminal(s) && self.phi.row(s).iter().any(|&x| x != 0.0) {
                return Err(Error::InvalidModel(vec![format!(
                    "feature row at terminal state {s} must be all-zero"
                )]));
            }
        }
        Ok(())
    }
}

/// Verdict of the spectral-radius convergence test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergencePrediction {
    pub converges: bool,
    pub rho: f64,
}

/// The assembled linear system: force matrices, iteration matrix, offset, and
/// fixed point.
#[derive(Debug, Clone)]
pub struct LinearTdSystem {
    mw: DMatrix<f64>,
    mtheta: DMatrix<f64>,
    iteration_matrix: DMatrix<f64>,
    offset: DVector<f64>,
    theta_star: DVector<f64>,
    mw_chol: Cholesky<f64, Dyn>,
    mw_eig_min: f64,
    mw_eig_max: f64,
}

/// Assembles `Mw`, `Mtheta`, `b`, the iteration matrix, and the fixed point
/// for the given MRP, features, and update weights.
pub fn build_system(mrp: &Mrp, phi: &FeatureMap, d: &UpdateDistribution) -> Result<LinearTdSystem> {
    phi.validate_for(mrp)?;
    d.validate_for(mrp)?;

    let weighted_phi = scale_rows(phi.matrix(), d.weights()); // D Phi
    let mw = phi.matrix().transpose() * &weighted_phi;
    let p_phi = mrp.transition() * phi.matrix();
    let mtheta = mrp.gamma() * phi.matrix().transpose() * scale_rows(&p_phi, d.weights());
    let offset = phi.matrix().transpose() * component_mul(d.weights(), mrp.reward());

    let eig = mw.clone().symmetric_eigen();
    let mw_eig_min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let mw_eig_max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(mw_eig_min > SINGULAR_TOL) {
        return Err(Error::SingularOptimizationForce);
    }
    let mw_chol = Cholesky::new(mw.clone()).ok_or(Error::SingularOptimizationForce)?;

    let fixed_point_system = &mw - &mtheta;
    let svd = nalgebra::SVD::new(fixed_point_system.clone(), false, false);
    let smallest = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !(smallest > SINGULAR_TOL) {
        return Err(Error::SingularFixedPoint);
    }
    let theta_star = fixed_point_system
        .lu()
        .solve(&offset)
        .ok_or(Error::SingularFixedPoint)?;

    let residual = (&mw * &theta_star - &mtheta * &theta_star - &offset).amax();
    let scale = 1.0f64.max(offset.amax()).max(theta_star.amax());
    if residual >= 1e-10 * scale.max(1.0) * 10.0 {
        return Err(Error::Internal(format!(
            "fixed-point residual {residual:.3e} out of tolerance"
        )));
    }

    let iteration_matrix = mw_chol.solve(&mtheta);

    Ok(LinearTdSystem {
        mw,
        mtheta,
        iteration_matrix,
        offset,
        theta_star,
        mw_chol,
        mw_eig_min,
        mw_eig_max,
    })
}

impl LinearTdSystem {
    pub fn dim(&self) -> usize {
        self.mw.nrows()
    }

    /// Optimization-force matrix `Phi' D Phi`.
    pub fn mw(&self) -> &DMatrix<f64> {
        &self.mw
    }

    /// Target-force matrix `gamma Phi' D P Phi`.
    pub fn mtheta(&self) -> &DMatrix<f64> {
        &self.mtheta
    }

    /// Iteration matrix `A = Mw^-1 Mtheta`.
    pub fn iteration_matrix(&self) -> &DMatrix<f64> {
        &self.iteration_matrix
    }

    /// Offset vector `b = Phi' D R`.
    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn theta_star(&self) -> &DVector<f64> {
        &self.theta_star
    }

    pub fn mw_eig_min(&self) -> f64 {
        self.mw_eig_min
    }

    pub fn mw_eig_max(&self) -> f64 {
        self.mw_eig_max
    }

    fn check_dim(&self, v: &DVector<f64>, name: &str) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{name} has length {}, expected {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `grad_w H(theta, w) = Mw w - Mtheta theta - b`.
    pub fn grad_w(&self, theta: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(theta, "theta")?;
        self.check_dim(w, "w")?;
        Ok(&self.mw * w - &self.mtheta * theta - &self.offset)
    }

    /// One exact outer iteration: `argmin_w H(theta, w) = Mw^-1 (Mtheta theta + b)`.
    pub fn exact_step(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(theta, "theta")?;
        Ok(self.mw_chol.solve(&(&self.mtheta * theta + &self.offset)))
    }

    /// Spectral radius of the iteration matrix and the verdict `rho < 1`.
    pub fn predict_convergence(&self) -> Result<ConvergencePrediction> {
        let rho = spectral_radius(&self.iteration_matrix)?;
        Ok(ConvergencePrediction {
            converges: rho < 1.0,
            rho,
        })
    }
}

/// Spectral radius `max_i |lambda_i(A)|` by dense eigenvalue decomposition.
/// Eigenvalues may be complex; the modulus is taken per eigenvalue.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "matrix is {}x{}, expected square",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter(
            "matrix has a non-finite entry".to_string(),
        ));
    }
    let schur =
        nalgebra::Schur::try_new(a.clone(), f64::EPSILON, 100_000).ok_or(Error::EigenFailure)?;
    let eigenvalues = schur.complex_eigenvalues();
    Ok(eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// The weighted projection `Pi_D = Phi (Phi' D Phi)^-1 Phi' D` onto the span
/// of the features. Idempotent and non-expansive in `||.||_D`.
pub fn projection_matrix(phi: &FeatureMap, d: &UpdateDistribution) -> Result<DMatrix<f64>> {
    if phi.n_states() != d.len() {
        return Err(Error::DimensionMismatch(format!(
            "feature matrix has {} rows, distribution has length {}",
            phi.n_states(),
            d.len()
        )));
    }
    let weighted_phi = scale_rows(phi.matrix(), d.weights());
    let mw = phi.matrix().transpose() * &weighted_phi;
    let eig = mw.clone().symmetric_eigen();
    let smallest = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !(smallest > SINGULAR_TOL) {
        return Err(Error::SingularOptimizationForce);
    }
    let chol = Cholesky::new(mw).ok_or(Error::SingularOptimizationForce)?;
    Ok(phi.matrix() * chol.solve(&weighted_phi.transpose()))
}

/// `H(theta, w) = 1/2 ||R + gamma P Phi theta - Phi w||_D^2`.
pub fn objective_value(
    mrp: &Mrp,
    phi: &FeatureMap,
    d: &UpdateDistribution,
    theta: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<f64> {
    phi.validate_for(mrp)?;
    d.validate_for(mrp)?;
    let m = phi.n_features();
    if theta.len() != m || w.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "theta/w have lengths {}/{}, expected {m}",
            theta.len(),
            w.len()
        )));
    }
    let residual =
        mrp.reward() + mrp.gamma() * (mrp.transition() * (phi.matrix() * theta)) - phi.matrix() * w;
    let norm = crate::mrp::weighted_norm(&residual, d)?;
    Ok(0.5 * norm * norm)
}

fn scale_rows(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= d[i];
    }
    out
}

fn component_mul(d: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(d.len(), |i, _| d[i] * v[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{counterexample_build, CounterExampleParams};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counterexample(epsilon: f64, gamma: f64, d1: f64) -> (Mrp, FeatureMap, UpdateDistribution) {
        counterexample_build(&CounterExampleParams::new(epsilon, gamma, d1).unwrap()).unwrap()
    }

    /// Unit weights on both non-terminal states, as in the scalar derivation.
    fn unit_weights() -> UpdateDistribution {
        UpdateDistribution::from_slice(&[1.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn counterexample_forces_with_unit_weights() {
        let epsilon = 0.1;
        let gamma = 0.95;
        let (mrp, phi, _) = counterexample(epsilon, gamma, 0.5);
        let sys = build_system(&mrp, &phi, &unit_weights()).unwrap();
        assert_relative_eq!(sys.mw()[(0, 0)], 5.0, epsilon = 1e-12);
        assert_relative_eq!(
            sys.mtheta()[(0, 0)],
            gamma * (6.0 - 4.0 * epsilon),
            epsilon = 1e-12
        );
    }

    #[test]
    fn counterexample_forces_with_normalized_weights() {
        let epsilon = 0.2;
        let gamma = 0.9;
        let (mrp, phi, d) = counterexample(epsilon, gamma, 0.5);
        let sys = build_system(&mrp, &phi, &d).unwrap();
        assert_relative_eq!(sys.mw()[(0, 0)], 2.5, epsilon = 1e-12);
        assert_relative_eq!(
            sys.mtheta()[(0, 0)],
            gamma * (3.0 - 2.0 * epsilon),
            epsilon = 1e-12
        );
        // Same iteration matrix as the unnormalized weighting.
        let sys_unit = build_system(&mrp, &phi, &unit_weights()).unwrap();
        assert_relative_eq!(
            sys.iteration_matrix()[(0, 0)],
            sys_unit.iteration_matrix()[(0, 0)],
            epsilon = 1e-14
        );
    }

    #[test]
    fn zero_rewards_give_zero_fixed_point() {
        let (mrp, phi, d) = counterexample(0.1, 0.5, 0.5);
        let sys = build_system(&mrp, &phi, &d).unwrap();
        assert!(sys.theta_star().amax() < 1e-14);
    }

    #[test]
    fn grad_vanishes_at_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mrp, phi, d) = crate::instances::random_instance(&mut rng, 6, 3);
        let sys = build_system(&mrp, &phi, &d).unwrap();
        let g = sys.grad_w(sys.theta_star(), sys.theta_star()).unwrap();
        assert!(g.amax() < 1e-10, "gradient at fixed point: {g}");
    }

    #[test]
    fn grad_counterexample_hand_value() {
        let epsilon = 0.1;
        let gamma = 0.95;
        let (mrp, phi, _) = counterexample(epsilon, gamma, 0.5);
        let sys = build_system(&mrp, &phi, &unit_weights()).unwrap();
        let theta = DVector::from_column_slice(&[1.0]);
        let w = DVector::zeros(1);
        let g = sys.grad_w(&theta, &w).unwrap();
        assert_relative_eq!(g[0], -gamma * (6.0 - 4.0 * epsilon), epsilon = 1e-12);
    }

    #[test]
    fn exact_step_fixes_theta_star() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mrp, phi, d) = crate::instances::random_instance(&mut rng, 5, 2);
        let sys = build_system(&mrp, &phi, &d).unwrap();
        let stepped = sys.exact_step(sys.theta_star()).unwrap();
        assert!((stepped - sys.theta_star()).amax() < 1e-10);
    }

    #[test]
    fn exact_step_counterexample_uniform_weights() {
        let epsilon = 0.1;
        let gamma = 0.95;
        let (mrp, phi, _) = counterexample(epsilon, gamma, 0.5);
        let sys = build_system(&mrp, &phi, &unit_weights()).unwrap();
        let next = sys.exact_step(&DVector::from_column_slice(&[1.0])).unwrap();
        assert_relative_eq!(
            next[0],
            gamma * (6.0 - 4.0 * epsilon) / 5.0,
            epsilon = 1e-13
        );
    }

    #[test]
    fn exact_step_counterexample_all_weight_on_second_state() {
        let epsilon = 0.3;
        let gamma = 0.9;
        let (mrp, phi, _) = counterexample(epsilon, gamma, 0.5);
        let d = UpdateDistribution::from_slice(&[0.0, 1.0, 0.0]).unwrap();
        let sys = build_system(&mrp, &phi, &d).unwrap();
        let next = sys.exact_step(&DVector::from_column_slice(&[1.0])).unwrap();
        assert_relative_eq!(next[0], gamma * (1.0 - epsilon), epsilon = 1e-13);
    }

    #[test]
    fn spectral_radius_identity_and_diagonal() {
        assert_relative_eq!(spectral_radius(&DMatrix::identity(3, 3)).unwrap(), 1.0);
        let diag = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.5, -0.9]));
        assert_relative_eq!(spectral_radius(&diag).unwrap(), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn spectral_radius_matches_power_growth_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let rho = spectral_radius(&a).unwrap();

        // Independent oracle: growth rate of ||A^k||_F, read off as the
        // geometric mean of consecutive norm ratios over k in [150, 200].
        let scaled = &a / rho; // keep powers in floating range; rescale after
        let mut power = scaled.clone();
        for _ in 1..150 {
            power = &power * &scaled;
        }
        let norm_150 = power.norm();
        for _ in 150..200 {
            power = &power * &scaled;
        }
        let norm_200 = power.norm();
        let oracle = rho * (norm_200 / norm_150).powf(1.0 / 50.0);
        assert!(
            (rho - oracle).abs() < 1e-3,
            "eigen rho = {rho}, growth oracle = {oracle}"
        );
    }

    #[test]
    fn spectral_radius_rejects_non_square_and_non_finite() {
        assert!(spectral_radius(&DMatrix::zeros(2, 3)).is_err());
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 0)] = f64::NAN;
        assert!(spectral_radius(&a).is_err());
    }

    #[test]
    fn predict_convergence_counterexample_uniform() {
        // gamma = 0.95, epsilon = 0.1: rho = 0.95 * 5.6 / 5 = 1.064 > 1.
        let (mrp, phi, d) = counterexample(0.1, 0.95, 0.5);
        let sys = build_system(&mrp, &phi, &d).unwrap();
        let pred = sys.predict_convergence().unwrap();
        assert!(!pred.converges);
        assert_relative_eq!(pred.rho, 0.95 * 5.6 / 5.0, epsilon = 1e-12);
    }

    #[test]
    fn predict_convergence_counterexample_stationary() {
        // Stationary weights give rho = gamma (4 - 2 eps) / (4 + eps) < 1.
        for (epsilon, gamma) in [(0.1, 0.95), (0.5, 0.99), (0.9, 0.8)] {
            let (mrp, phi, _) = counterexample(epsilon, gamma, 0.5);
            let restart = UpdateDistribution::from_slice(&[1.0, 0.0, 0.0]).unwrap();
            let d = mrp.stationary_distribution(Some(&restart)).unwrap();
            let sys = build_system(&mrp, &phi, &d).unwrap();
            let pred = sys.predict_convergence().unwrap();
            assert!(pred.converges);
            assert_relative_eq!(
                pred.rho,
                gamma * (4.0 - 2.0 * epsilon) / (4.0 + epsilon),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn tabular_features_give_rho_at_most_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let mrp = crate::instances::random_mrp(&mut rng, 5, 0.9);
            let phi = FeatureMap::new(DMatrix::identity(5, 5)).unwrap();
            let d = crate::instances::random_full_support_distribution(&mut rng, 5);
            let sys = build_system(&mrp, &phi, &d).unwrap();
            let pred = sys.predict_convergence().unwrap();
            assert!(
                pred.rho <= 0.9 + 1e-10,
                "tabular rho = {} > gamma",
                pred.rho
            );
            assert!(pred.converges);
        }
    }

    #[test]
    fn projection_is_identity_for_tabular_features() {
        let phi = FeatureMap::new(DMatrix::identity(4, 4)).unwrap();
        let d = UpdateDistribution::from_slice(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let pi = projection_matrix(&phi, &d).unwrap();
        assert!((pi - DMatrix::identity(4, 4)).amax() < 1e-12);
    }

    #[test]
    fn projection_fixes_its_range_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (_, phi, d) = crate::instances::random_instance(&mut rng, 6, 3);
        let pi = projection_matrix(&phi, &d).unwrap();
        assert!(
            (&pi * &pi - &pi).amax() < 1e-10,
            "projection not idempotent"
        );
        let w = DVector::from_fn(phi.n_features(), |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let in_range = phi.matrix() * w;
        assert!((&pi * &in_range - &in_range).amax() < 1e-10);
    }

    #[test]
    fn projection_is_nonexpansive_in_weighted_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..20 {
            let (_, phi, d) = crate::instances::random_instance(&mut rng, 6, 3);
            let pi = projection_matrix(&phi, &d).unwrap();
            let v = DVector::from_fn(phi.n_states(), |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let pv = &pi * &v;
            let norm_v = crate::mrp::weighted_norm(&v, &d).unwrap();
            let norm_pv = crate::mrp::weighted_norm(&pv, &d).unwrap();
            assert!(
                norm_pv <= norm_v + 1e-12,
                "||Pi v||_D = {norm_pv} > ||v||_D = {norm_v}"
            );
        }
    }

    #[test]
    fn objective_value_zero_cases() {
        let (mrp, phi, d) = counterexample(0.1, 0.5, 0.5);
        let zero = DVector::zeros(1);
        assert_eq!(objective_value(&mrp, &phi, &d, &zero, &zero).unwrap(), 0.0);
    }

    #[test]
    fn objective_value_all_weight_on_first_state() {
        // With all weight on s1, H = 1/2 (2 gamma theta - w)^2.
        let gamma = 0.9;
        let (mrp, phi, _) = counterexample(0.1, gamma, 0.5);
        let d = UpdateDistribution::from_slice(&[1.0, 0.0, 0.0]).unwrap();
        for (theta, w) in [(0.7, -0.3), (1.0, 1.0), (-2.0, 0.5)] {
            let got = objective_value(
                &mrp,
                &phi,
                &d,
                &DVector::from_column_slice(&[theta]),
                &DVector::from_column_slice(&[w]),
            )
            .unwrap();
            let expected = 0.5 * (2.0 * gamma * theta - w).powi(2);
            assert_relative_eq!(got, expected, epsilon = 1e-13);
        }
    }

    #[test]
    fn objective_value_matches_per_state_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let (mrp, phi, d) = crate::instances::random_instance(&mut rng, 5, 2);
        let m = phi.n_features();
        let theta = DVector::from_fn(m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let w = DVector::from_fn(m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let got = objective_value(&mrp, &phi, &d, &theta, &w).unwrap();

        // Oracle: explicit per-state summation of d(s) (...)^2 / 2.
        let mut acc = 0.0;
        for s in 0..mrp.n() {
            let mut lookahead = 0.0;
            for s2 in 0..mrp.n() {
                let mut phi_theta = 0.0;
                for j in 0..m {
                    phi_theta += phi.matrix()[(s2, j)] * theta[j];
                }
                lookahead += mrp.transition()[(s, s2)] * phi_theta;
            }
            let mut phi_w = 0.0;
            for j in 0..m {
                phi_w += phi.matrix()[(s, j)] * w[j];
            }
            let residual = mrp.reward()[s] + mrp.gamma() * lookahead - phi_w;
            acc += d.weight(s) * residual * residual;
        }
        assert_relative_eq!(got, 0.5 * acc, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_features_rejected() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(FeatureMap::new(phi).is_err());
    }

    #[test]
    fn features_with_support_outside_d_are_singular() {
        // Two features, but d supported on a single state: Mw is rank 1.
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let mrp = Mrp::new(p, DVector::zeros(2), 0.9, vec![false, false]).unwrap();
        let phi = FeatureMap::new(DMatrix::identity(2, 2)).unwrap();
        let d = UpdateDistribution::from_slice(&[1.0, 0.0]).unwrap();
        assert!(matches!(
            build_system(&mrp, &phi, &d),
            Err(Error::SingularOptimizationForce)
        ));
    }

    #[test]
    fn tied_forces_have_no_unique_fixed_point() {
        // At the exact d1 threshold the forces tie, Mw - Mtheta = 0 in the
        // scalar case, and the fixed-point solve must refuse.
        let epsilon = 0.1;
        let gamma = 0.95;
        let d1 = crate::analysis::counterexample_d1_threshold(epsilon, gamma);
        let (mrp, phi, d) = counterexample(epsilon, gamma, d1);
        assert!(matches!(
            build_system(&mrp, &phi, &d),
            Err(Error::SingularFixedPoint)
        ));
    }

    #[test]
    fn nonzero_terminal_feature_row_rejected() {
        let (mrp, _, d) = counterexample(0.1, 0.9, 0.5);
        let phi = FeatureMap::new(DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 1.0])).unwrap();
        assert!(build_system(&mrp, &phi, &d).is_err());
    }

    #[test]
    fn recurrence_matches_proposition_form() {
        // theta_{t+1} - theta* = A (theta_t - theta*) along exact iterations.
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..10 {
            let (mrp, phi, d) = crate::instances::random_instance(&mut rng, 6, 3);
            let sys = build_system(&mrp, &phi, &d).unwrap();
            let mut theta = sys.theta_star()
                + DVector::from_fn(phi.n_features(), |_, _| rng.random::<f64>() - 0.5);
            for _ in 0..5 {
                let next = sys.exact_step(&theta).unwrap();
                let predicted = sys.iteration_matrix() * (&theta - sys.theta_star());
                assert!((&next - sys.theta_star() - predicted).amax() < 1e-10);
                theta = next;
            }
        }
    }

    #[test]
    fn scale_invariance_of_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let (mrp, phi, d) = crate::instances::random_instance(&mut rng, 5, 2);
        let sys = build_system(&mrp, &phi, &d).unwrap();
        let scaled = build_system(&mrp, &phi, &d.scaled(7.5).unwrap()).unwrap();
        assert!((sys.iteration_matrix() - scaled.iteration_matrix()).amax() < 1e-12);
        assert!((sys.theta_star() - scaled.theta_star()).amax() < 1e-10);
        let p1 = sys.predict_convergence().unwrap();
        let p2 = scaled.predict_convergence().unwrap();
        assert_relative_eq!(p1.rho, p2.rho, epsilon = 1e-12);
    }
}
