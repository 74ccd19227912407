use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A model or experiment configuration is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A NaN or infinity appeared in a computed value.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    /// Stored parameters do not match the trunk's parameter registry.
    #[error("parameter registry mismatch: missing {missing:?}, extra {extra:?}, wrong shape {reshaped:?}")]
    RegistryMismatch { missing: Vec<String>, extra: Vec<String>, reshaped: Vec<String> },
    /// Training or sampling diverged at the given step.
    #[error("numeric divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
