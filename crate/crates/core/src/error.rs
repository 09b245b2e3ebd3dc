//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any stage of the localization pipeline.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite or out-of-domain numeric input (NaN into softmax, log of a
    /// non-positive value, NaN loss mid-training).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (unknown relation set, duplicate seeds,
    /// inconsistent model modes, checkpoint/graph mismatch).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input file content.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A frame with no usable signal (e.g. zero-norm feature row).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A candidate span contained no detections, so no pseudo-query exists.
    #[error("empty pseudo-query for span ({0:.4}, {1:.4})")]
    EmptyQuery(f64, f64),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Process exit code convention: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
