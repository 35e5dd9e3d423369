use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid offset {offset}: must be >= -{right} and step-aligned")]
    InvalidOffset { offset: i64, right: usize },

    #[error("relative distance {distance} outside table coverage [{min}, {max}]")]
    DistanceOutOfTable { distance: i64, min: i64, max: i64 },

    #[error("query row {row} has no allowed key")]
    EmptyRow { row: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cache out of sync: expected offset {expected}, cache holds {actual}")]
    CacheDesync { expected: i64, actual: i64 },

    #[error("chunk has {got} frames, expected {expected}")]
    ChunkSizeMismatch { expected: usize, got: usize },

    #[error("session is closed")]
    SessionClosed,

    #[error("session is still open")]
    SessionOpen,

    #[error("sessions in a batch must share (c, r); got {0}")]
    HeterogeneousConfig(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("input too short: {got} frames, need at least {need}")]
    InputTooShort { got: usize, need: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
