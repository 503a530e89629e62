use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value iteration did not converge after {iterations} iterations (gap {gap:e})")]
    NotConverged { iterations: usize, gap: f64 },

    #[error("zero-probability row at state {state}, intent {intent}")]
    ZeroRow { state: usize, intent: usize },

    #[error("domain construction failed: {0}")]
    Domain(String),

    #[error("unreachable sub-task for intent {intent}: {reason}")]
    UnreachableSubtask { intent: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid state index {0}")]
    InvalidState(usize),

    #[error("unknown session {0}")]
    UnknownSession(String),

    /// A request the session cannot accept in its current phase.
    #[error("rejected: {0}")]
    Rejected(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
