use thiserror::Error;

use crate::datapipe::grounding::GroundingError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} at position {position} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("non-finite value in {component} loss")]
    NonFiniteLoss { component: String },

    #[error("checkpoint checksum mismatch for {path}")]
    Checksum { path: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: String, expected: String },

    #[error("config fingerprint mismatch: checkpoint has {checkpoint}, config has {config}")]
    Fingerprint { checkpoint: String, config: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("split error: {0}")]
    Split(String),

    #[error(transparent)]
    Grounding(#[from] GroundingError),

    #[error("vlm client error: {0}")]
    Client(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::io("i/o", source)
    }
}
