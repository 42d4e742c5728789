use std::fmt;

use thiserror::Error;

/// Transport-level failure category reported by chat and generator backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendCategory {
    Network,
    Protocol,
    RateLimit,
}

impl fmt::Display for BackendCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendCategory::Network => f.write_str("network"),
            BackendCategory::Protocol => f.write_str("protocol"),
            BackendCategory::RateLimit => f.write_str("rate-limit"),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{category} error: {message}")]
pub struct BackendError {
    pub category: BackendCategory,
    pub message: String,
}

impl BackendError {
    pub fn new(category: BackendCategory, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    pub fn network(message: impl Into<String>) -> Self {
        Self::new(BackendCategory::Network, message)
    }

    pub fn protocol(message: impl Into<String>) -> Self {
        Self::new(BackendCategory::Protocol, message)
    }

    pub fn rate_limit(message: impl Into<String>) -> Self {
        Self::new(BackendCategory::RateLimit, message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("generation failed for child {child_index} of node {parent_id}: {source}")]
    ChildGeneration {
        parent_id: String,
        child_index: usize,
        #[source]
        source: BackendError,
    },

    #[error("generation failed for prompt {prompt_id}: {source}")]
    PromptGeneration {
        prompt_id: String,
        #[source]
        source: BackendError,
    },

    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),

    #[error("format error: expected {expected} prompts, parsed {got}")]
    Format { expected: usize, got: usize },

    #[error("pool imbalance: per-generator counts {counts:?}")]
    PoolImbalance { counts: Vec<(String, usize)> },

    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),

    #[error("class {0} has no statistics")]
    MissingClass(String),

    #[error("quota infeasible for class {class}: need {quota}, only {retained} retained")]
    QuotaInfeasible {
        class: String,
        quota: usize,
        retained: usize,
    },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
