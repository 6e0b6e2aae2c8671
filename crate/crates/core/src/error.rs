use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("oracle failure at record {index}: {reason}")]
    Oracle { index: usize, reason: String },

    #[error("oracle failure: {0}")]
    OracleCall(String),

    #[error("zero-norm record at index {0} cannot be normalized")]
    ZeroNormRecord(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset is not normalized")]
    NotNormalized,

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("LP numerical failure: {0}")]
    Numerical(String),

    #[error("scenario program infeasible for every gamma: {0}")]
    SopInfeasible(String),

    #[error("subsystem {id} certificate fails (margin {margin:.6} > 0)")]
    FailingCertificate { id: usize, margin: f64 },

    #[error("composition refused: zeta = {zeta:.6}, violating columns {columns:?}")]
    CompositionRefused { zeta: f64, columns: Vec<usize> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
