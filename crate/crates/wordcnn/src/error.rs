//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("shape error in {context}: {message}")]
    Shape { context: String, message: String },

    /// A vector file, vocabulary file, dataset file, or checkpoint is malformed.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// A configuration value violates its contract.
    #[error("config error: {0}")]
    Config(String),

    /// An input value is outside the operation's domain.
    #[error("input error: {0}")]
    Input(String),

    /// Training or checking produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
