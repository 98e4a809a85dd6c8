use thiserror::Error;

use crate::measure::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid measure: {0}")]
    Invalid(ValidationReport),

    /// The requested edit would break the measure's structure.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("underdetermined system: {0}")]
    Underdetermined(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("quantization underflow on segment {segment}: flux {flux} rounds to zero quanta")]
    QuantizationUnderflow { segment: usize, flux: f64 },

    #[error("grid under-resolved: need at least {required:?} cells, got {actual:?}")]
    Resolution { required: [usize; 3], actual: [usize; 3] },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
