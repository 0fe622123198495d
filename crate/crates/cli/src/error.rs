use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Input {
        path: PathBuf,
        source: evtrack::Error,
    },
    #[error(transparent)]
    Core(#[from] evtrack::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Verify(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Input { source, .. } => source.kind(),
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Verify(_) => "verify",
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
