//! CLI error type and the exit-code contract.
//!
//! Exit codes are stable for scripting: 0 success, 1 validation failure
//! (config schema, bad flags), 2 runtime failure (IO, corrupt files,
//! training errors, failed gradient checks).

use comet_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// The config document violates the schema; the message carries the
    /// offending field path.
    #[error("invalid config: {0}")]
    Config(String),
    /// Command-line arguments are inconsistent with each other or the config.
    #[error("invalid arguments: {0}")]
    Usage(String),
    /// A core operation failed at runtime.
    #[error("{0}")]
    Core(CoreError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    /// A data or checkpoint file is malformed: bad magic, version or
    /// checksum mismatch, truncation.
    #[error("bad file {path}: {reason}")]
    Format { path: String, reason: String },
    /// One or more gradient checks exceeded tolerance.
    #[error("{0} gradient check(s) failed")]
    GradCheck(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            _ => 2,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn format(path: &std::path::Path, reason: impl Into<String>) -> Self {
        CliError::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_errors_exit_one_runtime_errors_exit_two() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 1);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(
            CliError::Core(CoreError::EmptyInput("set")).exit_code(),
            2
        );
        assert_eq!(
            CliError::format(std::path::Path::new("f"), "truncated").exit_code(),
            2
        );
        assert_eq!(CliError::GradCheck(3).exit_code(), 2);
    }
}
