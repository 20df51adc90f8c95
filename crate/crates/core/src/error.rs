use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("worker {0} is not registered")]
    UnknownWorker(usize),

    #[error("dimension mismatch: table holds {expected}-vectors, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("key {key} outside table capacity {capacity}")]
    KeyOutOfRange { key: u64, capacity: u64 },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("incomplete record table: {0}")]
    IncompleteData(String),

    #[error("operation unsupported in {0} clock mode")]
    UnsupportedMode(&'static str),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("deadlock: {0}")]
    Deadlock(String),

    #[error("invariant breach: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status used by the CLI: 2 for bad configuration, 3 when
    /// a run aborted on a broken invariant, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::DimensionMismatch { .. }
            | Error::KeyOutOfRange { .. }
            | Error::UnsupportedMode(_) => 2,
            Error::Invariant(_) | Error::Deadlock(_) | Error::Numeric(_) | Error::Protocol(_) => 3,
            _ => 1,
        }
    }
}
