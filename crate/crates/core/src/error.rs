use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    /// A prior row has no index with positive mass.
    #[error("row {row} has empty support (no positive score)")]
    EmptySupport { row: usize },

    /// The value column is constant on the prior support, so the free energy
    /// is flat in the inverse temperature.
    #[error("values are constant on the support of row {row}, channel {channel}")]
    ConstantValues { row: usize, channel: usize },

    /// `q(i) = 0` where `p(i) > 0` in a KL term.
    #[error("absolute continuity violated at index {index}")]
    AbsoluteContinuity { index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for FemError {
    fn from(e: std::io::Error) -> Self {
        FemError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for FemError {
    fn from(e: serde_json::Error) -> Self {
        FemError::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, FemError>;

pub(crate) fn shape_err(what: impl Into<String>) -> FemError {
    FemError::Shape(what.into())
}
