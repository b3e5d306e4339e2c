use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("invalid basis: {0}")]
    InvalidBasis(String),
    #[error("invalid prompt length: {0}")]
    InvalidLength(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported parameter variant: {0}")]
    UnsupportedVariant(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("asymmetric input: {0}")]
    Asymmetric(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
