use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("log: non-positive input {value} at flat index {index}")]
    LogDomain { index: usize, value: f32 },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("idx file: {0}")]
    IdxFormat(String),

    #[error("query budget exhausted: requested {requested}, remaining {remaining}")]
    BudgetExhausted { requested: usize, remaining: usize },

    #[error("oracle rejected the api key")]
    Unauthorized,

    #[error("oracle transport: {0}")]
    Transport(String),

    #[error("oracle protocol: {0}")]
    Protocol(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
