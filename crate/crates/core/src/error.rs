use thiserror::Error;

pub type Result<T, E = ArmdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ArmdError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty plan: sequence length must be at least 1")]
    EmptyPlan,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint integrity error at byte {offset}: {reason}")]
    Integrity { offset: u64, reason: String },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("refused: {0}")]
    Refused(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
