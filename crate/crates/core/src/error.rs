use thiserror::Error;

/// Errors produced by model construction, linear algebra, and solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// A model failed its construction invariants. Carries one message per
    /// violated invariant.
    #[error("invalid model: {}", .0.join("; "))]
    InvalidModel(Vec<String>),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Phi' D Phi is singular: the feature columns are not linearly
    /// independent under the support of the update distribution.
    #[error("features not independent under d (Phi' D Phi singular)")]
    SingularOptimizationForce,

    /// Mw - Mtheta is singular, so the linear system has no unique fixed point.
    #[error("no unique fixed point (Mw - Mtheta singular)")]
    SingularFixedPoint,

    #[error("reducible chain: no unique stationary distribution")]
    ReducibleChain,

    #[error("eigenvalue computation failed to converge")]
    EigenFailure,

    /// The generic inner minimization did not reach tolerance.
    #[error("inner solve exceeded {cap} iterations at outer step {step}")]
    InnerSolveStalled { cap: usize, step: usize },

    /// Every sampled candidate distribution produced a singular system.
    #[error("all sampled distributions produced singular systems")]
    SearchFailed,

    /// Numerical postcondition violated where the math says it cannot be.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
