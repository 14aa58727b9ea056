use thiserror::Error;

/// Errors produced by the restoration pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("problem too large: {0}")]
    Size(String),

    #[error("ADMM diverged at iteration {iteration}: non-finite iterate")]
    Divergence { iteration: usize },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("unknown kernel: {0}")]
    UnknownKernel(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI on stderr.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::State(_) => "state",
            Error::Config(_) => "config",
            Error::Size(_) => "size",
            Error::Divergence { .. } => "divergence",
            Error::Metric(_) => "metric",
            Error::UnknownKernel(_) => "kernel",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
