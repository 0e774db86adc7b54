use thiserror::Error;

/// Crate-wide error type. Variants map onto distinct CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for an operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid input to an operation (empty list, unsorted boxes, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Invalid configuration (infeasible world spec, batch size 1, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Misuse of an API (backward on a non-scalar, unknown variable, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A data file violated its schema.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI. Error classes get distinct codes.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Parse { .. } | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
            Error::Config(_) | Error::Usage(_) => 5,
            Error::Dimension(_) | Error::Input(_) => 6,
        }
    }
}
