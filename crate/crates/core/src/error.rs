use thiserror::Error;

/// Errors raised by the tensor network library.
#[derive(Debug, Error)]
pub enum FtnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("degenerate step: {0}")]
    Degenerate(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("line search failed: {0}")]
    LineSearch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FtnError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FtnError::Dimension(msg.into()))
}
