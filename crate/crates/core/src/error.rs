use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} in `{label}`")]
    NonFinite { op: &'static str, label: String },
    #[error("no valid keys for query {query}")]
    NoValidKeys { query: usize },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("loss node is not scalar (has {0} elements)")]
    NotScalar(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("k={k} out of range for {classes} classes")]
    TopKOutOfRange { k: usize, classes: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{axis} extent {extent} is not divisible by tubelet size {patch}")]
    Indivisible { axis: &'static str, extent: usize, patch: usize },
    #[error("classification token already appended")]
    ClsAlreadyAppended,
    #[error("no valid objects in any frame (strict mode)")]
    NoValidObjects,
    #[error("degenerate episode: {0}")]
    DegenerateEpisode(String),
    #[error("non-finite objective value at {0}")]
    NonFiniteObjective(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
