use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// data/config problems are recoverable user errors, divergence and decode
/// failures are runtime errors.
#[derive(Debug, Error)]
pub enum DnpgError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("decode error: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, DnpgError>;
