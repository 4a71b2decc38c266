use thiserror::Error;

/// Crate-wide error type. Numerical failures carry enough context to tell a
/// modeling problem (bad input system) from a solver breakdown.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("all classes must share the same discount rate rho")]
    InconsistentRho,

    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("matrix is not positive semidefinite: {0}")]
    NotPositiveSemidefinite(String),

    #[error("coupling normalization undefined: largest eigenvalue of Htilde is {0:.3e} <= 0")]
    DegenerateCoupling(f64),

    #[error("degenerate Lyapunov equation: an eigenvalue pair of F sums to (near) zero")]
    DegenerateLyapunov,

    #[error("initial gain is not stabilizing: shifted closed-loop spectral abscissa {0:.6e} >= 0")]
    NotStabilizing(f64),

    #[error("Hamiltonian splitting failure: {0}")]
    SplittingFailure(String),

    #[error("graph-subspace extraction failed: cond(V1) = {0:.3e}")]
    GraphSubspace(f64),

    #[error("no convergence after {iterations} iterations (last step {last_step:.3e})")]
    NonConvergence { iterations: usize, last_step: f64 },

    #[error("independent solvers disagree: {0}")]
    SolverDisagreement(String),

    #[error("trajectory diverged in run {run} near t = {time:.6}")]
    Divergence { run: usize, time: f64 },

    #[error("window set misaligned with the recording grid: {0}")]
    WindowMisaligned(String),

    #[error("ensemble holds no runs")]
    EmptyEnsemble,

    #[error("persistency of excitation failed: {0}")]
    ExcitationFailure(String),

    #[error("nonfinite value produced in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad ensemble file: {0}")]
    BadEnsembleFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
