use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants map onto the CLI exit codes: usage/configuration problems exit 1,
/// data and I/O problems exit 2, numerical failures and frozen-contract
/// breaches exit 3.
#[derive(Debug, Error)]
pub enum RodError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("frozen-encoder contract violated: {0}")]
    Contract(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RodError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        RodError::Shape {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RodError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            RodError::Usage(_) | RodError::Config(_) | RodError::Shape { .. } => 1,
            RodError::Data(_) | RodError::Checkpoint(_) | RodError::Io { .. } => 2,
            RodError::Numerical(_) | RodError::Contract(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, RodError>;
