use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a precondition: mismatched shapes, out-of-range ids and so on.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("ingestion error in {path} at offset {offset}: {msg}")]
    Ingest {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("storage error in {path} at byte {offset}: {msg}")]
    Storage {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) => 2,
            Error::Ingest { .. } | Error::Storage { .. } | Error::Io { .. } => 3,
            Error::Verification(_) => 4,
        }
    }
}

pub(crate) fn ensure_dims(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::contract(format!(
            "{what}: expected dimension {expected}, got {got}"
        )));
    }
    Ok(())
}
