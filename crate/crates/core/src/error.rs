use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid probability space: {0}")]
    InvalidSpace(String),
    #[error("invalid position: {0}")]
    InvalidPosition(String),
    #[error("invalid scenario measure: {0}")]
    InvalidMeasure(String),
    #[error("operands live on different probability spaces")]
    SpaceMismatch,
    #[error("undefined extended-real operation: {0}")]
    UndefinedArithmetic(&'static str),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("argument outside the domain of {0}")]
    Domain(String),
    #[error("no applicable solver: {0}")]
    NoSolver(String),
    #[error("problem too large: {0}")]
    TooLarge(String),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("bracket failure: {0}")]
    Bracket(String),
    #[error("{path}: {reason}")]
    Input { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
