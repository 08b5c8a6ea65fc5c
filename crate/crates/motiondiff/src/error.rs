use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration value (bad schedule bounds, odd embedding dim, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A call violated an operation contract (shape mismatch, index out of range).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Text-format parse failure with source location.
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    /// Input data failed validation (unpaired files, bad rates, non-finite values).
    #[error("data error: {0}")]
    Data(String),

    /// Network evaluation produced non-finite values.
    #[error("evaluation fault in {context}")]
    Eval { context: String },

    /// Training aborted (non-finite loss, unusable batch).
    #[error("training fault at step {step}: {detail}")]
    Training { step: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
