use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] streammem_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("format error: {0}")]
    Format(#[from] FormatError),
    #[error("config digest mismatch: file was written for a different model")]
    ConfigMismatch,
}

impl Error {
    pub fn is_format(&self) -> bool {
        matches!(self, Error::Format(_) | Error::ConfigMismatch | Error::Json(_))
    }
}

/// Why a bank or index file was rejected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch")]
    Checksum,
    #[error("{0}")]
    Malformed(String),
}
