//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("configuration invalid:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numerical divergence: {message}{}", .checkpoint.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Divergence {
        message: String,
        checkpoint: Option<PathBuf>,
    },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("generator gave up: {0}")]
    GeneratorExhausted(String),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn range(msg: impl Into<String>) -> Self {
        Error::OutOfRange(msg.into())
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence { .. } => 3,
            Error::Io { .. } | Error::Parse { .. } => 4,
            _ => 1,
        }
    }
}
