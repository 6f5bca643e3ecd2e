use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the laboratory.
///
/// The variants are coarse categories; the CLI maps them onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("degenerate softmax: every entry of row {row} is masked")]
    DegenerateSoftmax { row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("state error: {0}")]
    State(String),

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
