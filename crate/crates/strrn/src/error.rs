//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors across the library.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    Shape {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An operation was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid input data (out-of-range index, non-finite value, empty input).
    #[error("invalid input: {0}")]
    Input(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// A file failed to parse.
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Referenced files are missing on disk.
    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    /// The component does not support the requested capability.
    #[error("capability error: {0}")]
    Capability(String),

    /// Two components disagree on a shared contract (e.g. landmark counts).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Numerically degenerate input (e.g. zero inter-pupil distance).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Data generation failed after bounded retries.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
