//! Crate-wide error type and exit-code mapping.

use std::io;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: String, line: u64, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },

    #[error("transport error: {0}")]
    Transport(String),

    /// A message violated the place-ownership or alignment contract.
    /// Indicates a partitioning bug, not bad input data.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("corrupt data in {path}: {msg}")]
    Corrupt { path: String, msg: String },

    #[error("consistency violation: {0}")]
    Consistency(String),

    #[error("run aborted: {0}")]
    Aborted(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 for data/environment errors,
    /// 3 for internal consistency violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Protocol(_) | Error::Consistency(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
