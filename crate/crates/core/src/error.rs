use thiserror::Error;

/// Unified error type for the whole crate.
///
/// Variants map onto the CLI exit-code classes: usage-style problems
/// (`Config`, `Argument`, `Range`), data problems (`Data`), consistency and
/// audit problems (`Conflict`, `NotFound`, `Consistency`, `Audit`), and
/// io/format problems (`Io`, `Format`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("audit failure: {0}")]
    Audit(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit-code class used by the CLI: 2 usage, 3 data, 4 consistency/audit,
    /// 5 io/format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Shape(_) | Error::Range(_) => 2,
            Error::Data(_) | Error::Numeric(_) => 3,
            Error::Conflict(_) | Error::NotFound(_) | Error::Consistency(_) | Error::Audit(_) => 4,
            Error::Format(_) | Error::Io(_) => 5,
        }
    }
}
