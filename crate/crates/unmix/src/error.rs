use thiserror::Error;

/// Crate-wide error type. Variants map onto process exit codes at the CLI
/// boundary: config 2, data 3, numeric 4, verification 5.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis contract violation in a tensor operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// NaN/Inf or other numeric breakdown.
    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// Invalid configuration (bad key, inconsistent sizes, unusable split).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset ingestion or persistence problems.
    #[error("data error: {0}")]
    Data(String),

    /// A verification gate (gradient check, scan equivalence) failed.
    #[error("verification failure: {0}")]
    Verification(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { context: context.into(), detail: detail.into() }
    }

    /// Exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. } | Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric { .. } => 4,
            Error::Verification(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
