use thiserror::Error;

use crate::tree::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid node {0}")]
    InvalidNode(NodeId),

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Failures surfaced by generation, reward and embedding providers.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("reward out of range: {0}")]
    RewardOutOfRange(f64),

    #[error("invalid backend input: {0}")]
    InvalidInput(String),
}

impl BackendError {
    /// Short stable tag written into result records.
    pub fn class(&self) -> &'static str {
        match self {
            BackendError::Transport(_) => "transport",
            BackendError::Schema(_) => "schema",
            BackendError::RewardOutOfRange(_) => "reward_out_of_range",
            BackendError::InvalidInput(_) => "invalid_input",
        }
    }

    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
