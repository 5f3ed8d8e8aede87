//! Single error type shared by every pipeline stage.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Configuration validation failed; carries every violated bound, not just the first.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (wrong magic, bad JSON line, truncated record, ...).
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("missing column {column:?} in {path}")]
    MissingColumn { column: String, path: PathBuf },

    #[error("dataset is empty after filtering: {0}")]
    EmptyDataset(String),

    /// Transport-level backend failure that survived all retries.
    #[error("gateway failure: {0}")]
    Gateway(String),

    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A user has no motives and no explicit query; nothing to retrieve from.
    #[error("no retrieval signal for user {user_id}: no motives and no query")]
    NoSignal { user_id: String },

    #[error("unknown user {0}")]
    UnknownUser(String),

    /// A required on-disk artifact is absent; names the stage that produces it.
    #[error("missing artifact {artifact}: run the `{stage}` stage first")]
    MissingArtifact { artifact: PathBuf, stage: &'static str },

    /// Catch-all for violated preconditions and invalid arguments.
    #[error("{0}")]
    Invalid(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
