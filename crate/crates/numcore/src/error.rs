use thiserror::Error;

#[derive(Error, Debug)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced: {0}")]
    Numerical(String),
    #[error("closure is not deterministic; gradient check refused")]
    NonDeterministic,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumError>;
