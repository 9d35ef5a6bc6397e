use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unusable clip: {0}")]
    ZeroEnergy(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("unsatisfiable generation constraint: {0}")]
    Unsatisfiable(String),

    #[error("condition undefined: {0}")]
    UndefinedCondition(String),

    #[error("invalid condition vector: {0}")]
    InvalidCondition(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unreadable audio {path}: {reason}")]
    Audio { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parsable category, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ZeroEnergy(_) => "zero-energy",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Manifest(_) => "manifest",
            Error::Unsatisfiable(_) => "unsatisfiable",
            Error::UndefinedCondition(_) => "undefined-condition",
            Error::InvalidCondition(_) => "invalid-condition",
            Error::Empty(_) => "empty",
            Error::NonFinite(_) => "non-finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Audio { .. } => "audio",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
