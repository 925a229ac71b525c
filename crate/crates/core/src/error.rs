use thiserror::Error;

/// Errors raised by the urn process, the design catalog and the asymptotic engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SeuError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupted urn state: {0}")]
    CorruptedState(String),

    #[error("design domain error: {0}")]
    DesignDomain(String),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("central limit regime not valid: lambda = {lambda} >= 1/2")]
    CltInvalid { lambda: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("replication {stream_index} failed: {source}")]
    Replication {
        stream_index: u64,
        #[source]
        source: Box<SeuError>,
    },
}

pub type Result<T> = std::result::Result<T, SeuError>;

pub(crate) fn invalid(msg: impl Into<String>) -> SeuError {
    SeuError::InvalidArgument(msg.into())
}
