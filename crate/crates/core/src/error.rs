use thiserror::Error;

/// Errors produced by field construction, loss evaluation and the verification suites.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("region for class {class} is empty")]
    UndefinedRegion { class: usize },

    #[error("predicted marginal of class {class} is zero")]
    DegenerateMarginal { class: usize },

    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_param(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
