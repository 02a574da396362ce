use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("view has no foreground pixels")]
    EmptyView,

    #[error("coordinate {value} outside the normalized range [-1, 1] at pixel ({row}, {col})")]
    OutOfRange { row: usize, col: usize, value: f64 },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("no consensus: {inliers} inliers out of {total} correspondences")]
    NoConsensus { inliers: usize, total: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: expected {expected}: {message}")]
    Format {
        path: PathBuf,
        expected: &'static str,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        expected: &'static str,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            expected,
            message: message.into(),
        }
    }
}
