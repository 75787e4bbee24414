use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum FluxError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("group {group} quota {quota} exceeds its {available} tokens")]
    QuotaExceeded {
        group: usize,
        quota: usize,
        available: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error("interrupted")]
    Interrupted,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FluxError>;

pub(crate) fn invalid_config(msg: impl Into<String>) -> FluxError {
    FluxError::InvalidConfig(msg.into())
}
