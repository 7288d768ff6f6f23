use ctxmod_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quad(#[from] ctxmod_quad::QuadError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("intervention target {target} out of range for {m} concepts")]
    BadTarget { target: usize, m: usize },
    #[error("{0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;
