use thiserror::Error;

#[derive(Debug, Error)]
pub enum DflowError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid flow: {0}")]
    InvalidFlow(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("insufficient resolution: {0}")]
    InsufficientResolution(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<crate::expr::ParseError> for DflowError {
    fn from(e: crate::expr::ParseError) -> Self {
        DflowError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DflowError>;
