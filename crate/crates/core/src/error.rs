use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or constructor arguments.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's preconditions (shapes, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values appeared during a computation.
    #[error("numerical failure{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numerical { step: Option<usize>, message: String },

    /// Rejection sampling could not produce a valid draw.
    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("malformed audio file {path}: {message}")]
    MalformedAudio { path: PathBuf, message: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint config mismatch: expected digest {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },

    #[error("dataset digest mismatch on resume: run expects {expected}, checkpoint has {found}")]
    DatasetMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn numerical(step: Option<usize>, message: impl Into<String>) -> Self {
        Error::Numerical {
            step,
            message: message.into(),
        }
    }
}
