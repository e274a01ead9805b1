use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown taxonomy label: {0}")]
    Taxonomy(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch in {file}: expected {expected:08x}, found {found:08x}")]
    Checksum {
        file: String,
        expected: u32,
        found: u32,
    },

    #[error("non-finite loss at step {step} in term {term}")]
    NonFiniteLoss { step: u64, term: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
