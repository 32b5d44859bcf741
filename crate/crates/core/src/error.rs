use thiserror::Error;

use crate::llm::GatewayError;
use crate::store::StoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("unsupported cost for unit {unit}: quadratic coefficient {a} must be positive")]
    UnsupportedCost { unit: usize, a: f64 },

    #[error("problem has no charging sessions")]
    EmptyProblem,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(
        "no convergence after {iterations} iterations (primal residual {primal:.3e}, dual residual {dual:.3e})"
    )]
    ConvergenceFailure {
        iterations: usize,
        primal: f64,
        dual: f64,
    },

    #[error("cancelled")]
    Cancelled,

    #[error("illegal state: {0}")]
    IllegalState(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: GatewayError,
    },

    #[error(transparent)]
    Gateway(#[from] GatewayError),

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error("problem file: {0}")]
    ProblemFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
