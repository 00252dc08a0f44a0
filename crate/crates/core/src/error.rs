use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module in the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not line up for the requested operation.
    Dimension { op: &'static str, detail: String },
    /// Batch-statistics normalization was asked to run on fewer than two rows.
    DegenerateBatch { rows: usize },
    /// An API was driven outside its contract (wrong cache variant, push
    /// after flush, double flush, ...).
    Contract(String),
    /// A config, topology, or model file failed validation.
    Validation(String),
    /// A numeric failure: divergence, NaN loss, a failed tolerance assertion.
    Numeric(String),
    Io(String),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// One-word machine-parseable class, used by the CLI error line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::DegenerateBatch { .. } => "degenerate-batch",
            Error::Contract(_) => "contract",
            Error::Validation(_) => "validation",
            Error::Numeric(_) => "numeric",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code: 2 for validation-type failures, 3 for numeric ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::DegenerateBatch { rows } => {
                write!(f, "batch normalization needs a batch of >= 2 rows, got {rows}")
            }
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
