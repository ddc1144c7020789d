use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty attention window in row {row}: every mask weight is zero")]
    EmptyAttentionWindow { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("backward called twice on the same graph without reset_grads")]
    BackwardTwice,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid action {action} (action set has {n_actions} actions)")]
    InvalidAction { action: usize, n_actions: usize },

    #[error("step called after the episode ended; call reset first")]
    StepAfterDone,

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("trajectory buffer underflow: needed {needed}, got {got}")]
    BufferUnderflow { needed: usize, got: usize },

    #[error("actor pipeline shut down")]
    Disconnected,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
