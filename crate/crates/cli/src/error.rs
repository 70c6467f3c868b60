use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("{context}: {source}")]
    Core {
        context: &'static str,
        #[source]
        source: polar_layout_core::Error,
    },
}

impl CliError {
    /// 1 for usage errors, 2 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Attaches a module name to core errors.
pub trait Context<T> {
    fn context(self, context: &'static str) -> CliResult<T>;
}

impl<T> Context<T> for Result<T, polar_layout_core::Error> {
    fn context(self, context: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Core { context, source })
    }
}
