use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("index {index} out of range for codebook with {bound} codewords")]
    InvalidIndex { index: usize, bound: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("artifact mismatch: fingerprint {found} does not match {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("undefined rate: {0}")]
    UndefinedRate(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::FingerprintMismatch { .. } => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
