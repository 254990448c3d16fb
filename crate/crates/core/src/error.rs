use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// On-disk bytes that do not decode (bad magic, truncated dataset file, ...).
    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("block {block} out of range (allocated {allocated})")]
    Address { block: u64, allocated: u64 },

    #[error("payload of {got} bytes does not match block size {expected}")]
    Size { expected: usize, got: usize },

    /// Caller-supplied data that violates a precondition (unsorted keys, reserved key, ...).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("dataset ingestion failed: {0}")]
    Ingestion(String),
}
