use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sentinel index {index} out of range (sentinel count {count})")]
    SentinelOutOfRange { index: usize, count: usize },

    #[error("sequence of {len} tokens exceeds max input length {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("non-finite value in parameter `{0}`")]
    NonFiniteParameter(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("width mismatch: expected {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch for `{name}`: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("frozen parameter `{0}` changed during training")]
    FreezeViolation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("configuration `{variant}` requires a {artifact}")]
    MissingArtifact {
        variant: &'static str,
        artifact: &'static str,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("span corruption: {0}")]
    Corruption(String),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("unparseable NER sequence: {0}")]
    NerParse(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("unknown tensor `{0}` in checkpoint")]
    UnknownTensor(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("config error at `{key}`: {reason}")]
    ConfigKey { key: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
