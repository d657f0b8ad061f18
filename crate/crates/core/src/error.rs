use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid scenario tree: {0}")]
    InvalidTree(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("time index {index} out of range (grid has {steps} steps)")]
    IndexOutOfRange { index: usize, steps: usize },

    #[error("cost evaluation produced a non-finite {term} value at node {node}")]
    NonFiniteCost { node: usize, term: &'static str },

    #[error("gradients required: {0} has no gradient evaluator")]
    GradientsRequired(&'static str),

    #[error("cost audit failed: {0}")]
    AuditFailed(String),

    #[error("infeasible control plan: {0}")]
    InfeasiblePlan(String),

    #[error("coercivity unverified: {0}")]
    CoercivityUnverified(String),

    #[error("plan is not certified: {0}")]
    NotCertified(String),

    #[error("stopping problems require a one-dimensional control (k = 1), got k = {0}")]
    StoppingDimension(usize),

    #[error("L-marginal mismatch at path {path}: {left} vs {right}")]
    MarginalMismatch { path: usize, left: f64, right: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
