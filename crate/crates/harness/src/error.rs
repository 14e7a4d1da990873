use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] inavit::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{context}: {source}")]
    Json { context: String, source: serde_json::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("unknown parameter `{0}` in checkpoint")]
    UnknownParam(String),
    #[error("missing parameter `{0}` in checkpoint")]
    MissingParam(String),
    #[error("shape mismatch for `{name}`: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("config hash mismatch: checkpoint {checkpoint}, expected {expected}")]
    HashMismatch { checkpoint: String, expected: String },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("empty input to {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}

pub fn json_err(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> HarnessError {
    let context = context.into();
    move |source| HarnessError::Json { context, source }
}
