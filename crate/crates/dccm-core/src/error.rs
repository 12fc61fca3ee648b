use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible reference: {0}")]
    InfeasibleReference(String),

    #[error("geodesic solve failed: {0}")]
    Geodesic(String),

    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
