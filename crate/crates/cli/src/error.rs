use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("experiment failed: {0}")]
    Experiment(#[from] vla_lab::Error),
    #[error("{failed} of {total} seeds failed; see manifest.json")]
    Partial { failed: usize, total: usize },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Experiment(_) => "experiment",
            CliError::Partial { .. } => "partial",
            CliError::Integrity(_) => "integrity",
            CliError::Json { .. } => "format",
        }
    }

    /// Process exit status; 2 matches the argument parser's own failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Experiment(_) => 4,
            CliError::Partial { .. } => 5,
            CliError::Integrity(_) | CliError::Json { .. } => 6,
            CliError::Io { .. } => 7,
        }
    }
}
