use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected}, got {actual}")]
    ShapeMismatch {
        layer: usize,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("backward called without a recorded forward pass")]
    NoForwardRecorded,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("corrupt stream at byte offset {offset}: {reason}")]
    CorruptStream { offset: usize, reason: String },

    #[error("no feasible bottleneck configuration at any location; relax the accuracy floor or widen the sweep bounds")]
    AllInfeasible,

    #[error("missing trained model for partition {0}")]
    MissingPartition(u16),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("connect failed: {0}")]
    Connect(String),

    #[error("remote error {code}: {message}")]
    Remote { code: u16, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
