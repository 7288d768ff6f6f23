use thiserror::Error;

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("invalid ground truth: {0}")]
    Invalid(String),
    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: String },
    #[error("regression failed: {0}")]
    Regression(String),
}

pub type Result<T> = std::result::Result<T, IdentError>;
