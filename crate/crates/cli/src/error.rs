use std::path::PathBuf;

use thiserror::Error;

/// Failures the CLI reports with their own exit semantics; everything else
/// travels as a plain `anyhow` chain.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("bad path {path}: {reason}")]
    BadPath { path: PathBuf, reason: String },
    #[error("{path}:{line}: malformed metrics line: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}
