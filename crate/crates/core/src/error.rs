use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum UmeError {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("negative evidence {value} at index {index}")]
    NegativeEvidence { index: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label set is empty")]
    EmptyLabelSet,

    #[error("zero-norm projection vector at row {0}")]
    ZeroNorm(usize),

    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocabulary { id: u32, vocab: usize },

    #[error("expert index {index} out of range 1..={count}")]
    InvalidExpert { index: usize, count: usize },

    #[error("label hierarchy contains a cycle through '{0}'")]
    Cycle(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("target imbalance ratio {requested} is infeasible; achievable range is [{min:.3}, {max:.3}]")]
    InfeasibleImbalance { requested: f64, min: f64, max: f64 },

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, UmeError>;
