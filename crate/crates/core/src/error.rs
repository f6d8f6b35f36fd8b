use thiserror::Error;

/// Errors produced by model evaluation, fitting, and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of inputs, parameters, or feature maps disagree.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-supplied argument is outside its domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A score or intermediate value became NaN or infinite.
    #[error("non-finite score for label {label}: {value}")]
    NonFinite { label: usize, value: f64 },

    /// The requested computation exceeds what the chosen method supports.
    #[error("capability exceeded: {0}")]
    Capability(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
