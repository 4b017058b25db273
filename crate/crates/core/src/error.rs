use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("kernel mismatch between operands")]
    KernelMismatch,

    #[error("dual value {0} outside the representable exponent range")]
    Saturation(f64),

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error at line {line}: {message}")]
    Data { line: usize, message: String },

    #[error("intensity {value} exceeds envelope {lambda_max} at a sampled candidate")]
    EnvelopeViolation { value: f64, lambda_max: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Json(_) => 2,
            Error::Data { .. } | Error::Io(_) | Error::Csv(_) | Error::EnvelopeViolation { .. } => 3,
            Error::Saturation(_) | Error::NumericalBreakdown(_) => 4,
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::KernelMismatch => 2,
        }
    }
}
