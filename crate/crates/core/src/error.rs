use thiserror::Error;

/// Errors produced anywhere in the solver, SME integrator, ensemble engine or
/// experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("matrix A is not of full column rank (smallest/largest singular value = {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("x-subproblem Newton iteration did not converge after {iterations} iterations (gradient norm {residual:e})")]
    NewtonFailed { iterations: usize, residual: f64 },

    #[error("x-subproblem matrix is singular (tau = 0 with a fully linearized coupling term)")]
    SingularSubproblem,

    #[error("preconditioner M-hat is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    IndefiniteMhat { min_eigenvalue: f64 },

    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:e} below tolerance {tolerance:e})")]
    NotPsd { eigenvalue: f64, tolerance: f64 },

    #[error("time grids differ: {0}")]
    GridMismatch(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("all {runs} runs diverged")]
    AllDiverged { runs: usize },

    #[error("schedule undefined: {0}")]
    ScheduleUndefined(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
