use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Core {
        path: PathBuf,
        source: suplid::Error,
    },
    #[error(transparent)]
    Pipeline(#[from] suplid::Error),
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl CliError {
    /// 1 for bad input or configuration, 2 for broken invariants.
    pub fn exit_code(&self) -> i32 {
        let core = match self {
            CliError::Core { source, .. } | CliError::Pipeline(source) => Some(source),
            _ => None,
        };
        match (self, core) {
            (CliError::Internal(_), _) | (_, Some(suplid::Error::Invariant(_))) => 2,
            _ => 1,
        }
    }

    pub fn at(path: impl Into<PathBuf>) -> impl FnOnce(suplid::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Core { path, source }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
