use thiserror::Error;

pub type Result<T> = std::result::Result<T, ClsmError>;

#[derive(Debug, Error)]
pub enum ClsmError {
    #[error("invalid target span: {0}")]
    InvalidSpan(String),
    #[error("pitch {0} outside the supported range [55, 84]")]
    OutOfRange(u8),
    #[error("invalid token: {0}")]
    InvalidToken(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("no path survived the exclusion rules")]
    EmptyEvaluation,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("midi: {0}")]
    Midi(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}
