use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    /// A caller broke an operation's precondition (shape mismatch, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Bad user-supplied data (token out of range, empty batch, ...).
    #[error("invalid input: {0}")]
    Input(String),
    /// Inconsistent experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed or truncated checkpoint bytes.
    #[error("format error: {0}")]
    Format(String),
    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
