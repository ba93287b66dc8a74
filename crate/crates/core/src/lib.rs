//! A numerical laboratory for temporal-difference value prediction viewed
//! as iterative optimization.
//!
//! The library treats a TD-style learner as the iteration
//! `theta_{t+1} ≈ argmin_w H(theta_t, w)` over a two-argument objective `H`
//! and provides:
//!
//! - finite Markov reward processes with Bellman machinery and stationary
//!   distributions ([`mrp`]),
//! - the quadratic-loss linear-approximation specialization with its force
//!   matrices, iteration matrix, fixed point, and spectral-radius convergence
//!   test ([`linear`]),
//! - a family of two-argument objectives (quadratic, Huber, log-cosh,
//!   ridge-regularized, control with greedification) together with numerical
//!   estimation of their force constants ([`objective`]),
//! - exact and K-step-gradient solvers with full trajectory recording
//!   ([`solver`]),
//! - convergence prediction vs. observation, the classic two-state divergence
//!   example with its analytic thresholds, and contraction-bound verification
//!   ([`analysis`]),
//! - random instance generators for experiments ([`instances`]) and a batch
//!   experiment driver with JSON configs and CSV/JSON outputs ([`experiment`]).

// Validations are written as `!(x > tol)` so NaN falls on the rejecting side.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod instances;
pub mod linear;
pub mod mrp;
pub mod objective;
pub mod solver;

mod error;

pub use error::{Error, Result};
