use thiserror::Error;

pub type Result<T, E = DeepGpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DeepGpError {
    #[error("matrix is not positive definite even after jitter {max_jitter:e}")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("matrix is not symmetric (asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("hyperparameter `{name}` must be positive and finite, got {value}")]
    NonPositiveHyperparameter { name: &'static str, value: f64 },

    #[error("minibatch is empty")]
    EmptyBatch,

    #[error("batch index {index} out of range for {n} data points")]
    BatchIndexOutOfRange { index: usize, n: usize },

    #[error("invalid chunk plan: {0}")]
    InvalidPlan(String),

    #[error("layer index {index} is not in 1..={depth}")]
    InvalidLayerIndex { index: usize, depth: usize },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("objective became non-finite at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("exact GP oracle limited to {limit} points, got {n}")]
    GuardViolation { n: usize, limit: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },

    #[error("ragged rows: row {row} has {found} fields, expected {expected}")]
    RaggedRows { row: usize, expected: usize, found: usize },

    #[error("file contains no data rows")]
    EmptyFile,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model file version `{found}` is not supported (expected `{expected}`)")]
    VersionMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DeepGpError {
    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        DeepGpError::DimensionMismatch {
            context,
            expected,
            found,
        }
    }
}
