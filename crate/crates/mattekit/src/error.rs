//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched or otherwise unusable tensor/grid dimensions.
    #[error("shape error: {0}")]
    Shape(String),
    /// Argument outside its mathematical domain (e.g. T = 0, tau > 1).
    #[error("domain error: {0}")]
    Domain(String),
    /// Non-finite values where finite ones are required.
    #[error("invalid value: {0}")]
    InvalidValue(String),
    /// Malformed serialized data; `offset` is the byte where parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    /// Programming-contract violation (e.g. duplicate parameter names).
    #[error("logic error: {0}")]
    Logic(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidValue(msg.into())
    }
    pub fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
