use std::path::PathBuf;

use layoutlab_autodiff::TensorError;
use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("unknown layout preset `{name}`; valid presets: {}", valid.join(", "))]
    UnknownPreset { name: String, valid: Vec<&'static str> },

    #[error("invalid layout spec: {0}")]
    InvalidSpec(String),

    #[error("cannot tokenize an empty interaction sequence")]
    EmptySequence,

    #[error("timestamps are not sorted at interaction {index}")]
    UnsortedTimestamps { index: usize },

    #[error("layout `{spec}` leaks its own targets ({leaked}); pass allow_leakage to train it anyway")]
    Leakage { spec: String, leaked: String },

    #[error("no loss-included targets in batch")]
    NoTargets,

    #[error("layout `{0}` does not support target-aware parallel scoring")]
    UnsupportedLayout(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
