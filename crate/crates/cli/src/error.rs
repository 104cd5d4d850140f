use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failures surfaced to the shell; each maps to an exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] haate_core::Error),
    #[error("{0} grid cell(s) failed; partial results were written")]
    FailedCells(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::FailedCells(_) => 1,
            CliError::Io { .. } | CliError::Core(haate_core::Error::Io(_)) => 3,
            CliError::Usage(_) | CliError::Core(_) => 2,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
