use thiserror::Error;

/// Library-wide error type. Shape/contract violations inside the graph
/// panic instead (they are programming errors); everything that depends
/// on files, configs or user data comes back through here.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable kind string, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Parse(_) => "parse",
            Error::Validation(_) => "validation",
            Error::Alignment(_) => "alignment",
            Error::InsufficientData(_) => "insufficient_data",
            Error::EmptyInput(_) => "empty_input",
            Error::Incompatible(_) => "incompatible",
            Error::NonFinite(_) => "non_finite",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
