use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The response space is too large to enumerate; callers should fall back
    /// to Monte Carlo estimation.
    #[error("enumeration refused: |V|^L_max = {size} exceeds the limit of {limit}")]
    EnumerationRefused { size: u128, limit: u64 },

    #[error("non-finite gradient in task {task} at step {step}: {detail}")]
    NonFinite {
        task: usize,
        step: usize,
        detail: String,
    },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("config rejected:\n  {}", .0.join("\n  "))]
    Schema(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
