use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point: zero range")]
    DegeneratePoint,

    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("graph state error: {0}")]
    State(String),

    #[error("sequence error: {0}")]
    Sequence(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::DegeneratePoint
            | Error::InvalidPoint(_)
            | Error::Config(_)
            | Error::UndefinedMetric(_)
            | Error::InvalidPose(_)
            | Error::Shape(_)
            | Error::Sequence(_)
            | Error::Label(_)
            | Error::Format { .. } => 2,
            Error::State(_) | Error::Io { .. } => 1,
        }
    }
}
