use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("backward already ran on this record; re-run the forward pass first")]
    BackwardReused,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable identifier for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Invalid(_) => "invalid",
            Error::BackwardReused => "backward_reused",
            Error::NonFinite(_) => "non_finite",
            Error::Unreachable(_) => "unreachable",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
