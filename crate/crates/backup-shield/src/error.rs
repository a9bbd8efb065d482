use thiserror::Error;

/// Errors surfaced by the library. Dimension and finiteness violations are
/// rejected loudly instead of being coerced; a safety filter must not guess.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("controller returned a non-finite input at state {state:?}")]
    NonFiniteController { state: Vec<f64> },

    #[error("backup flow diverged (|component| > {limit:e}) at theta = {theta}")]
    DivergedFlow { theta: f64, limit: f64 },

    #[error("theta grid must be nonempty, ascending and start at >= 0")]
    InvalidThetaGrid,

    #[error("qp solver stalled after {iterations} iterations (degenerate rows?)")]
    SolverStall { iterations: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
