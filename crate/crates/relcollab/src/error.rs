//! Error type with stable codes and process exit statuses.

use std::path::PathBuf;

use relcollab_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("dataset not found: {0}")]
    DatasetMissing(PathBuf),
    #[error("{0}")]
    Config(String),
    #[error("no relation dumps found under {0}")]
    NoRelations(PathBuf),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Error::Format { path: path.into(), message: message.to_string() }
    }

    /// Machine-readable code printed as `error[code]: ...`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Core(CoreError::NonFiniteLoss { .. }) => "non-finite-loss",
            Error::Core(CoreError::MissingSpacing(_)) => "missing-spacing",
            Error::Core(CoreError::MissingLabel(_)) => "missing-label",
            Error::Core(CoreError::Config(_)) | Error::Config(_) => "config",
            Error::Core(_) => "invalid",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::DatasetMissing(_) => "dataset-missing",
            Error::NoRelations(_) => "no-relations",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DatasetMissing(_) | Error::Core(CoreError::MissingSpacing(_)) => 2,
            Error::Core(CoreError::NonFiniteLoss { .. }) => 3,
            _ => 1,
        }
    }
}
