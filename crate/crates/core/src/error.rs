use thiserror::Error;

use crate::history::History;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate budget: buyer context {0} has zero norm")]
    DegenerateBudget(usize),

    #[error("invalid price {price} for good {good}: prices must be strictly positive")]
    InvalidPrice { good: usize, price: f64 },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("constraint violation: {0}; project the candidate first")]
    ConstraintViolation(String),

    #[error("projection undefined: {0}")]
    ProjectionUndefined(String),

    #[error("unsupported utility regime {regime} for {operation}")]
    UnsupportedRegime { regime: String, operation: &'static str },

    #[error("non-finite value in layer {layer}: {detail}")]
    NumericFailure { layer: usize, detail: String },

    #[error("{method} aborted at epoch {epoch}: {detail}")]
    SolverAborted { method: &'static str, epoch: usize, detail: String, history: Box<History> },

    #[error("oracle could not certify an equilibrium: {0}")]
    OracleFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
