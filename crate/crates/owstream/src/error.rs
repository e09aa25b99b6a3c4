use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("degenerate embedding: pre-normalization norm {0:e}")]
    DegenerateEmbedding(f64),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
