//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline, from graph construction to
/// training. Variants map onto the CLI exit-code classes: configuration,
/// data, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("unknown class index {index} (dictionary has {known} classes)")]
    MissingClass { index: usize, known: usize },

    #[error("unknown class name {0:?}")]
    MissingClassName(String),

    #[error("layout too small: {0}")]
    Capacity(String),

    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: String,
        expected: String,
        actual: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
