//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model/experiment configuration (bad dims, out-of-range fields,
    /// unknown keys, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed operation input (shape mismatch, odd K where even is
    /// required, empty batch, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite value produced during forward/backward or optimization.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Degenerate input that the math cannot handle (zero-norm feature row).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Dataset files missing or unparseable.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Persisted artifact failed validation (truncation, checksum, magic).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Checkpoint and requested configuration do not match (format version
    /// or architecture digest).
    #[error("compatibility error: {0}")]
    Incompatible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Prepend location context (e.g. the training step) keeping the variant.
    pub fn context(self, prefix: &str) -> Error {
        match self {
            Error::Config(m) => Error::Config(format!("{prefix}: {m}")),
            Error::Input(m) => Error::Input(format!("{prefix}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{prefix}: {m}")),
            Error::Degenerate(m) => Error::Degenerate(format!("{prefix}: {m}")),
            Error::Ingestion(m) => Error::Ingestion(format!("{prefix}: {m}")),
            Error::Integrity(m) => Error::Integrity(format!("{prefix}: {m}")),
            Error::Incompatible(m) => Error::Incompatible(format!("{prefix}: {m}")),
            Error::Io(e) => Error::Integrity(format!("{prefix}: io error: {e}")),
        }
    }
}
