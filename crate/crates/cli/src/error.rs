use std::fmt;
use std::io;

use shears::ShearsError;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad config file, unknown field, invalid value.
    Config,
    /// A checkpoint or earlier-stage output is missing, unreadable or tampered.
    Artifact,
    /// Non-finite loss or similar.
    Numeric,
    Other,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Artifact => 3,
            ErrorKind::Numeric => 4,
            ErrorKind::Other => 1,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn artifact(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Artifact, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// Prefixes the message with where the failure happened.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ShearsError> for CliError {
    fn from(e: ShearsError) -> Self {
        let kind = match &e {
            ShearsError::InvalidArgument(_)
            | ShearsError::UnknownModule(_)
            | ShearsError::InvalidRank { .. }
            | ShearsError::InvalidConfig(_) => ErrorKind::Config,
            ShearsError::NotFrozen
            | ShearsError::FrozenHashMismatch { .. }
            | ShearsError::Format(_)
            | ShearsError::Io { .. }
            | ShearsError::Json(_) => ErrorKind::Artifact,
            ShearsError::NonFiniteLoss { .. } => ErrorKind::Numeric,
            ShearsError::EvaluationFailed { reason, .. } if reason.contains("non-finite") => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Other,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::new(ErrorKind::Other, e.to_string())
    }
}
