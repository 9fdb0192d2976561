//! Error type shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid attribution: {0}")]
    InvalidAttribution(String),

    #[error("empty target token set")]
    EmptyTarget,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("backend lacks capability `{capability}` required by {method}")]
    Capability {
        method: &'static str,
        capability: &'static str,
    },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("trace error at line {line}: {message}")]
    Trace { line: usize, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
