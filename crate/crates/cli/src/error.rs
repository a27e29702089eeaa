use std::io;
use std::path::{Path, PathBuf};

/// Failures surfaced by the command line, mapped onto stable exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Core(#[from] vra_core::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for usage/configuration problems, 2 for invalid data.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_data_error() => 2,
            _ => 1,
        }
    }
}
