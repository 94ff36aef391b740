use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("context overflow{}: {needed} positions exceed max context {max}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    ContextOverflow {
        needed: usize,
        max: usize,
        step: Option<usize>,
    },

    #[error("context overflow in example {id}: {needed} positions exceed max context {max}")]
    ExampleOverflow { id: String, needed: usize, max: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("snapshot mismatch: group sampled from {group} but old policy is {old}")]
    SnapshotMismatch { group: u64, old: u64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
