use std::io;

use thiserror::Error;

/// Errors produced by the aggregation, training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes.
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A configuration value is invalid.
    #[error("invalid config: {0}")]
    Config(String),

    /// A backward pass was called with a tape that does not match its inputs.
    #[error("tape/state mismatch: {0}")]
    State(String),

    /// The similarity matrix has no nonzero column.
    #[error("degenerate descriptor: all columns of the similarity matrix are zero")]
    DegenerateDescriptor,

    #[error("index out of range: {0}")]
    Index(String),

    /// A numerical routine failed (overflow, failed factorization, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A dataset cannot satisfy a batch plan.
    #[error("data error: {0}")]
    Data(String),

    /// Training produced non-finite values.
    #[error("training error: {0}")]
    Training(String),

    /// The world cannot fit the requested places.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Query and database positions cannot be compared under a criterion.
    #[error("criterion error: {0}")]
    Criterion(String),

    /// A file did not match its expected binary or text layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::DegenerateDescriptor => "degenerate",
            Error::Index(_) => "index",
            Error::Numeric(_) => "numeric",
            Error::Argument(_) => "argument",
            Error::Data(_) => "data",
            Error::Training(_) => "training",
            Error::Capacity(_) => "capacity",
            Error::Criterion(_) => "criterion",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: impl Into<String>, rhs: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.into(),
            rhs: rhs.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
