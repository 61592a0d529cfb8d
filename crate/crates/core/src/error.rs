use thiserror::Error;

/// Errors raised by model construction, graph operations and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    Argument { op: &'static str, detail: String },

    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn arg_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Argument {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn contract_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Contract {
        op,
        detail: detail.into(),
    })
}
