use std::io;

use thiserror::Error;

pub type Result<T, E = ShearsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ShearsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown module `{0}`")]
    UnknownModule(String),

    #[error("rank {rank} is not a valid choice for module `{module}` (choices {choices:?})")]
    InvalidRank {
        module: String,
        rank: usize,
        choices: Vec<usize>,
    },

    #[error("invalid sub-adapter config: {0}")]
    InvalidConfig(String),

    #[error("base model is not frozen")]
    NotFrozen,

    #[error("frozen base hash mismatch: recorded {recorded}, found {found}")]
    FrozenHashMismatch { recorded: String, found: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("candidate `{0}` has not been evaluated")]
    Unevaluated(String),

    #[error("evaluation of `{config}` failed: {reason}")]
    EvaluationFailed { config: String, reason: String },

    #[error("tensor format: {0}")]
    Format(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl ShearsError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        ShearsError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
