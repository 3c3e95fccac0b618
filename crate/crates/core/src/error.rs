use std::io;

use thiserror::Error;

pub type Result<T, E = TammError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TammError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate vector: norm {norm:e} is below {threshold:e}")]
    DegenerateVector { norm: f64, threshold: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TammError {
    pub fn shape(msg: impl Into<String>) -> Self {
        TammError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        TammError::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        TammError::Format {
            offset,
            message: msg.into(),
        }
    }
}
