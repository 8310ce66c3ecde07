use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by loading, fitting, scoring and evaluating.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor file {path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("{path}: shape mismatch: {reason}")]
    Shape { path: PathBuf, reason: String },

    #[error("{path}: non-finite value at row {row}, column {col}")]
    NonFinite { path: PathBuf, row: usize, col: usize },

    #[error("{path}: label {label} at row {row} outside [0, {num_classes})")]
    LabelOutOfRange {
        path: PathBuf,
        row: usize,
        label: i64,
        num_classes: usize,
    },

    #[error("class {class} has {count} samples (need at least {required})")]
    MissingClass {
        class: usize,
        count: usize,
        required: usize,
    },

    #[error("split '{split}' has no labels")]
    MissingLabels { split: String },

    #[error("split '{split}' has no logits")]
    MissingLogits { split: String },

    #[error("unknown split '{split}'")]
    UnknownSplit { split: String },

    #[error("row {row} has zero norm and cannot be L2-normalized")]
    ZeroNormRow { row: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("Cholesky factorization failed after regularization; smallest eigenvalue estimate {min_eigenvalue:e}")]
    Cholesky { min_eigenvalue: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("JSON error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// True for failures of the filesystem itself (as opposed to bad content).
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
