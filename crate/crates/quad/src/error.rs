use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("image side must be even and at least 16, got {0}")]
    BadSide(usize),
    #[error("colour value {0} outside [0, 1]")]
    ValueOutOfRange(f64),
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("invalid context {label:?}: {reason}")]
    BadContext { label: String, reason: String },
    #[error("image buffer holds {actual} values, expected {expected}")]
    BadImage { expected: usize, actual: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("context {0} not present in dataset")]
    MissingContext(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, QuadError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> QuadError {
    let path = path.into();
    move |source| QuadError::Io { path, source }
}
