use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config file {path}:{line}: {message}")]
    ConfigParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("training diverged at episode {episode}: {what} is not finite")]
    Diverged { episode: usize, what: &'static str },

    #[error("episode finished; call reset before stepping again")]
    EpisodeDone,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown {kind} `{value}`")]
    UnknownName { kind: &'static str, value: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used on the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::ConfigParse { .. } => "config",
            Error::Shape { .. } => "shape",
            Error::Diverged { .. } => "diverged",
            Error::EpisodeDone => "episode_done",
            Error::Checkpoint(_) => "checkpoint",
            Error::UnknownName { .. } => "unknown_name",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
