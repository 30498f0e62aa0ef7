use thiserror::Error;

/// Failure categories shared by every module of the engine.
#[derive(Debug, Error)]
pub enum GameError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("capacity exceeded: position {position} with max_seq_len {max}")]
    Capacity { position: usize, max: usize },
    #[error("snapshot identity mismatch: {0}")]
    Identity(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f32 },
    #[error("training error: {0}")]
    Training(String),
    #[error("undefined metric: {0}")]
    Metric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GameError>;

pub(crate) fn contract(msg: impl Into<String>) -> GameError {
    GameError::Contract(msg.into())
}
