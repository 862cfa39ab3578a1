//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed container or image data (bad magic, bad header, trailing bytes).
    #[error("format error: {0}")]
    Format(String),

    /// Recognized container but a payload kind we do not handle.
    #[error("unsupported format: {0}")]
    Unsupported(String),

    /// Array dimensions incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument or invariant violation (non-finite data, bad config).
    #[error("validation error: {0}")]
    Invalid(String),

    /// Non-finite loss or other numerical failure during optimization.
    #[error("numerical failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
