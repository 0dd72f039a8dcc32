use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty result: {0}")]
    EmptyResult(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("corrupt cache entry {path}: {reason}")]
    CorruptCache { path: String, reason: String },
    #[error("non-finite value in {layer}")]
    NonFinite { layer: String },
    #[error("split leakage: {0}")]
    Leakage(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("missing cache for stage `{stage}`; run `sourcespace {stage}` first")]
    MissingCache { stage: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
