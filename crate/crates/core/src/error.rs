use qoe_numeric::NumericError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RcaError {
    /// Invalid configuration or arguments.
    #[error("config: {0}")]
    Config(String),

    /// Malformed or inconsistent data.
    #[error("data: {0}")]
    Data(String),

    /// A stage precondition was violated (wrong label source, etc.).
    #[error("contract: {0}")]
    Contract(String),

    /// A required upstream artifact is missing.
    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error(transparent)]
    Numeric(#[from] NumericError),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl RcaError {
    /// True when the failure stems from a non-finite value during training
    /// or evaluation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, RcaError::Numeric(NumericError::NonFinite(_)))
    }
}

pub type Result<T> = std::result::Result<T, RcaError>;

pub(crate) fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(RcaError::Data(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(RcaError::Config(msg.into()))
}
