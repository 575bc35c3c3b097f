use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("sequence too short: {0}")]
    TooShort(String),

    #[error("corpus format: {0}")]
    Format(String),

    #[error("frozen model: {0}")]
    Frozen(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
