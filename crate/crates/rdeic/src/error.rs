//! Error type shared across the codec.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step out of range: {0}")]
    StepOutOfRange(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("entropy model: {0}")]
    EntropyModel(String),

    #[error("range coder: {0}")]
    Coder(String),

    #[error("corrupt bitstream: {0}")]
    CorruptBitstream(String),

    #[error("unsupported bitstream version {0}")]
    VersionMismatch(u16),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("model hash mismatch: bitstream was written by a different model")]
    ModelHashMismatch,

    #[error("training: {0}")]
    Training(String),

    #[error("config: {0}")]
    Config(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
