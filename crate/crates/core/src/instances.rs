//! Random problem instances for experiments and verification sweeps.
//!
//! All generators take the RNG explicitly, so a seeded generator reproduces
//! the same instance set. Chains are drawn irreducible (a uniform mixing
//! component is blended in) and feature matrices are redrawn until well
//! conditioned, keeping downstream linear solves far from the singularity
//! thresholds.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linear::{build_system, FeatureMap, LinearTdSystem};
use crate::mrp::{Mrp, UpdateDistribution};
use crate::objective::{ControlProblem, Greedify};

/// A random irreducible MRP without terminal states: transition rows are
/// normalized positive draws blended with the uniform kernel, rewards are
/// standard normal.
pub fn random_mrp(rng: &mut impl Rng, n: usize, gamma: f64) -> Mrp {
    let transition = random_mixing_kernel(rng, n);
    let reward = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    Mrp::new(transition, reward, gamma, vec![false; n]).expect("generated MRP is valid")
}

fn random_mixing_kernel(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
    for mut row in p.row_iter_mut() {
        let sum: f64 = row.iter().sum();
        row /= sum;
    }
    0.85 * p + DMatrix::from_element(n, n, 0.15 / n as f64)
}

/// A random full-column-rank feature matrix with standard normal entries,
/// redrawn until the smallest singular value clears 0.1.
pub fn random_feature_map(rng: &mut impl Rng, n: usize, m: usize) -> FeatureMap {
    loop {
        let phi = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng));
        let smallest = nalgebra::SVD::new(phi.clone(), false, false)
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if smallest > 0.1 {
            return FeatureMap::new(phi).expect("well-conditioned by construction");
        }
    }
}

/// A random full-support distribution: a uniform Dirichlet draw blended with
/// the uniform distribution so no weight falls below `0.1 / n`.
pub fn random_full_support_distribution(rng: &mut impl Rng, n: usize) -> UpdateDistribution {
    let mut w = DVector::from_fn(n, |_, _| -(1.0 - rng.random::<f64>()).ln());
    let total: f64 = w.iter().sum();
    w /= total;
    let uniform = DVector::from_element(n, 1.0 / n as f64);
    UpdateDistribution::new(0.9 * w + 0.1 * uniform).expect("positive weights")
}

/// A random instance with `n in [2, max_n]`, `m in [1, min(n, max_m)]`,
/// `gamma in [0.3, 0.99)`, irreducible chain, full-rank features, and
/// full-support weights.
pub fn random_instance(
    rng: &mut impl Rng,
    max_n: usize,
    max_m: usize,
) -> (Mrp, FeatureMap, UpdateDistribution) {
    let n = rng.random_range(2..=max_n.max(2));
    let m = rng.random_range(1..=max_m.min(n).max(1));
    let gamma = rng.random_range(0.3..0.99);
    let mrp = random_mrp(rng, n, gamma);
    let phi = random_feature_map(rng, n, m);
    let d = random_full_support_distribution(rng, n);
    (mrp, phi, d)
}

/// Like [`random_instance`], but redrawn until the spectral radius of the
/// iteration matrix stays outside `[1 - margin, 1 + margin]`, so finite-step
/// runs are observably convergent or divergent. Near-critical dynamics are
/// excluded by redrawing, not by shrinking the admissible parameter space.
pub fn random_decisive_instance(
    rng: &mut impl Rng,
    max_n: usize,
    max_m: usize,
    margin: f64,
) -> (Mrp, FeatureMap, UpdateDistribution, LinearTdSystem) {
    loop {
        let (mrp, phi, d) = random_instance(rng, max_n, max_m);
        let Ok(sys) = build_system(&mrp, &phi, &d) else {
            continue;
        };
        let Ok(pred) = sys.predict_convergence() else {
            continue;
        };
        if (pred.rho - 1.0).abs() > margin {
            return (mrp, phi, d, sys);
        }
    }
}

/// A random instance whose optimization force dominates the target force
/// (`F_theta < F_w`): the discount is rescaled below the critical value
/// `lambda_min(Mw) / sigma_max(Phi' D P Phi)` at which the forces tie.
pub fn random_contractive_instance(
    rng: &mut impl Rng,
    max_n: usize,
    max_m: usize,
) -> (Mrp, FeatureMap, UpdateDistribution) {
    loop {
        let n = rng.random_range(2..=max_n.max(2));
        let m = rng.random_range(1..=max_m.min(n).max(1));
        let mrp = random_mrp(rng, n, 0.5);
        let phi = random_feature_map(rng, n, m);
        let d = random_full_support_distribution(rng, n);

        // F_theta(gamma) = gamma * sigma_max(Phi' D P Phi) is linear in gamma,
        // so gamma = u * gamma_crit with u < 1 forces eta = F_theta/F_w < 1.
        let mut weighted_phi = phi.matrix().clone();
        for (i, mut row) in weighted_phi.row_iter_mut().enumerate() {
            row *= d.weight(i);
        }
        let mw = phi.matrix().transpose() * &weighted_phi;
        let lambda_min = mw
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let target_part = phi.matrix().transpose() * {
            let mut pphi = mrp.transition() * phi.matrix();
            for (i, mut row) in pphi.row_iter_mut().enumerate() {
                row *= d.weight(i);
            }
            pphi
        };
        let sigma_max = nalgebra::SVD::new(target_part, false, false)
            .singular_values
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        if !(sigma_max > 0.0 && lambda_min > 1e-8) {
            continue;
        }
        let gamma_crit = lambda_min / sigma_max;
        let gamma = (rng.random_range(0.3..0.95) * gamma_crit).min(0.99);
        if gamma < 1e-6 {
            continue;
        }
        let mrp = Mrp::new(
            mrp.transition().clone(),
            mrp.reward().clone(),
            gamma,
            vec![false; n],
        )
        .expect("same chain with rescaled gamma");
        return (mrp, phi, d);
    }
}

/// A pure-regression instance: the chain mixes uniformly in one step and the
/// feature columns are centered, so `P Phi = 0` and the target force
/// vanishes (`Mtheta = 0` up to rounding).
pub fn random_regression_instance(
    rng: &mut impl Rng,
    n: usize,
    m: usize,
) -> (Mrp, FeatureMap, UpdateDistribution) {
    assert!(m < n, "centering costs one rank: need m < n");
    let transition = DMatrix::from_element(n, n, 1.0 / n as f64);
    let reward = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let mrp = Mrp::new(transition, reward, 0.9, vec![false; n]).expect("uniform chain is valid");
    let phi = loop {
        let mut raw = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng));
        for j in 0..m {
            let mean = raw.column(j).sum() / n as f64;
            for i in 0..n {
                raw[(i, j)] -= mean;
            }
        }
        let smallest = nalgebra::SVD::new(raw.clone(), false, false)
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if smallest > 0.1 {
            break FeatureMap::new(raw).expect("full rank after centering");
        }
    };
    let d = random_full_support_distribution(rng, n);
    (mrp, phi, d)
}

/// A random control problem with `q`-features drawn on the unit sphere.
///
/// Uniform feature norms keep the analytic Lipschitz bound
/// `gamma E_{s'}[max_a' ||phi(s', a')||^2]` valid: the bound folds the
/// current pair's feature norm into the same expectation, which requires the
/// norms not to vary across pairs.
pub fn random_control_problem(
    rng: &mut impl Rng,
    n_states: usize,
    n_actions: usize,
    m: usize,
    gamma: f64,
    greedify: Greedify,
) -> ControlProblem {
    let pairs = n_states * n_actions;
    let q_features: DMatrix<f64> = DMatrix::from_fn(pairs, m, |_, _| StandardNormal.sample(rng));
    let q_features = {
        let mut f = q_features;
        for mut row in f.row_iter_mut() {
            let norm = row.norm();
            if norm < 1e-12 {
                row[0] = 1.0;
            } else {
                row /= norm;
            }
        }
        f
    };
    let rewards = DVector::from_fn(pairs, |_, _| StandardNormal.sample(rng));
    let transitions = {
        let mut t = DMatrix::from_fn(pairs, n_states, |_, _| rng.random::<f64>() + 0.05);
        for mut row in t.row_iter_mut() {
            let sum: f64 = row.iter().sum();
            row /= sum;
        }
        t
    };
    let policy = {
        let mut pi = DMatrix::from_fn(n_states, n_actions, |_, _| rng.random::<f64>() + 0.05);
        for mut row in pi.row_iter_mut() {
            let sum: f64 = row.iter().sum();
            row /= sum;
        }
        pi
    };
    let weights = random_full_support_distribution(rng, n_states)
        .weights()
        .clone();
    ControlProblem::new(
        n_states,
        n_actions,
        weights,
        policy,
        q_features,
        rewards,
        transitions,
        gamma,
        greedify,
    )
    .expect("generated control problem is valid")
}
