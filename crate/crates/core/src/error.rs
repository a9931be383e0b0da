use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, ordering).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A forward computation produced NaN or infinity.
    #[error("non-finite values produced by {0}")]
    NonFinite(String),
    /// A volume or checkpoint file could not be decoded.
    #[error("format error: {0}")]
    Format(String),
    /// A metric is not defined for the given input (for example an empty mask).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("config error: {0}")]
    Config(String),
    /// Training produced a non-finite loss or gradient.
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
