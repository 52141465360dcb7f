use thiserror::Error;

/// Errors raised across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("rank deficient input: row {row} has post-projection norm {norm:e}")]
    Rank { row: usize, norm: f64 },
    #[error("index {index} out of range 0..{len}")]
    Index { index: usize, len: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate distribution: {0}")]
    Degenerate(String),
    #[error("numerical error at step {step}: {msg}")]
    Numerical { step: usize, msg: String },
    #[error("invalid state: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint does not match config: {}", .0.join("; "))]
    CheckpointMismatch(Vec<String>),
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
