//! Central-difference gradient checking for [`Objective`] implementations.
//!
//! The analytic `grad_w` of every objective is validated against a finite
//! difference of the value in `w`; the target argument is never perturbed, so
//! kinks introduced by hard greedification do not enter.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::objective::Objective;
use crate::Result;

/// Central finite difference of `H(theta, .)` at `w` with step `h`.
pub fn finite_difference_grad_w(
    obj: &dyn Objective,
    theta: &DVector<f64>,
    w: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let mut grad = DVector::zeros(w.len());
    let mut probe = w.clone();
    for i in 0..w.len() {
        let step = h * w[i].abs().max(1.0);
        probe[i] = w[i] + step;
        let plus = obj.value(theta, &probe);
        probe[i] = w[i] - step;
        let minus = obj.value(theta, &probe);
        probe[i] = w[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Relative error between analytic and finite-difference gradients at one
/// probe: `||g - g_fd|| / max(||g||, ||g_fd||, 1e-8)`.
pub fn rel_grad_error(obj: &dyn Objective, theta: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let analytic = obj.grad_w(theta, w);
    let numeric = finite_difference_grad_w(obj, theta, w, 1e-6);
    let scale = analytic.norm().max(numeric.norm()).max(1e-8);
    (analytic - numeric).norm() / scale
}

/// Maximum relative gradient error over `probes` random `(theta, w)` pairs
/// drawn from `[-2, 2]^m`.
pub fn max_rel_grad_error(obj: &dyn Objective, probes: usize, rng_seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let dim = obj.dim();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let theta = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
        let w = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
        worst = worst.max(rel_grad_error(obj, &theta, &w));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;
    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            3
        }
        fn value(&self, theta: &DVector<f64>, w: &DVector<f64>) -> f64 {
            0.5 * (w - theta).norm_squared() + w[0] * w[1]
        }
        fn grad_w(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
            let mut g = w - theta;
            g[0] += w[1];
            g[1] += w[0];
            g
        }
    }

    struct WrongGradient;
    impl Objective for WrongGradient {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, _theta: &DVector<f64>, w: &DVector<f64>) -> f64 {
            0.5 * w.norm_squared()
        }
        fn grad_w(&self, _theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
            2.0 * w
        }
    }

    #[test]
    fn correct_gradient_passes() {
        assert!(max_rel_grad_error(&Quadratic, 25, 1).unwrap() < 1e-7);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        assert!(max_rel_grad_error(&WrongGradient, 25, 2).unwrap() > 0.1);
    }
}
