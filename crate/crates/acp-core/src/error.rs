//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any layer of the toolkit.
#[derive(Debug, Error)]
pub enum AcpError {
    /// Input bytes could not be parsed into the expected format.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// A name does not exist in the active vocabulary.
    #[error("unknown {kind} name {name:?}")]
    Vocab { kind: &'static str, name: String },

    /// Matrix or vector dimensions do not agree.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A documented contract of an operation was violated by its inputs.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric value became NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Bad configuration (missing file, unknown key, infeasible setting).
    #[error("config error: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl AcpError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        AcpError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        AcpError::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, AcpError>;
