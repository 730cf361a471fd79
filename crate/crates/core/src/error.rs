use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape exponent {0} outside [0.2, 1]")]
    ShapeOutOfRange(f64),

    #[error("degenerate mesh: every triangle has zero area")]
    DegenerateMesh,

    #[error("size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: unsupported point-cloud format")]
    UnsupportedFormat { path: PathBuf },

    #[error("{path}: {found} points, need at least {min}")]
    TooFewPoints {
        path: PathBuf,
        found: usize,
        min: usize,
    },

    #[error("{path}: non-finite coordinate at point {index}")]
    NonFiniteCoordinate { path: PathBuf, index: usize },

    #[error("fit diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by the command-line front end for exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::NonFinite(_)
            | Error::InvalidArgument(_)
            | Error::ShapeOutOfRange(_)
            | Error::SizeMismatch { .. }
            | Error::Config(_) => ErrorCategory::Usage,
            Error::Parse { .. }
            | Error::UnsupportedFormat { .. }
            | Error::TooFewPoints { .. }
            | Error::NonFiniteCoordinate { .. } => ErrorCategory::Input,
            Error::DegenerateMesh | Error::Diverged { .. } => ErrorCategory::Numerical,
            Error::Io { .. } | Error::Json(_) => ErrorCategory::Io,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Input,
    Numerical,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 2,
            ErrorCategory::Input => 3,
            ErrorCategory::Numerical => 4,
            ErrorCategory::Io => 5,
        }
    }
}
