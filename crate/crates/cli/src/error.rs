use std::path::PathBuf;

use manifold_recon::ReconError;
use thiserror::Error;

/// Process exit codes. `2` is reserved for command-line usage errors
/// reported by the argument parser.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NOT_FOUND: i32 = 4;
pub const EXIT_RUNTIME: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("input not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::NotFound(_) => EXIT_NOT_FOUND,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ReconError> for CliError {
    fn from(e: ReconError) -> Self {
        match e {
            ReconError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Fails with [`CliError::NotFound`] unless `path` exists.
pub fn require_input(path: &std::path::Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::NotFound(path.to_path_buf()))
    }
}
