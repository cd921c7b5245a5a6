use std::path::PathBuf;

use taxifed::eval::EvalError;
use taxifed::fed::FedError;
use taxifed::ingest::IngestError;
use taxifed::nn::NnError;
use thiserror::Error;

/// Process exit status for a successful command.
pub const EXIT_OK: i32 = 0;
/// Process exit status for any runtime failure.
pub const EXIT_RUNTIME: i32 = 1;
/// Process exit status for an invalid configuration or flag.
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Input { path: PathBuf, source: IngestError },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("refusing to write into non-empty directory {}; pass --force to overwrite", .0.display())]
    NotEmpty(PathBuf),
    #[error("{0}")]
    Data(String),
    #[error("training failed: {0}")]
    Training(#[from] FedError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl ToString) -> Self {
        CliError::Config {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}
