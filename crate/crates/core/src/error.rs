use std::io;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI error reports.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Missing(_) => "missing",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Missing(_) => 3,
            Error::Io(_) => 4,
            Error::Format(_) => 5,
            Error::Shape(_) => 6,
            Error::Contract(_) => 7,
            Error::NonFinite(_) => 8,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}

pub(crate) use contract_err;
pub(crate) use shape_err;
