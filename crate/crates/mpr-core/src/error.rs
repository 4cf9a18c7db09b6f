use thiserror::Error;

/// Errors shared by every module in the crate.
///
/// `Config` maps to CLI exit code 2, `Numeric` to exit code 3.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Bad shapes, bad parameters, missing or inconsistent inputs.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value was produced; `op` names the operation.
    #[error("numeric error in `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    /// Track preprocessing could not proceed (caller decides fallback).
    #[error("preprocessing error: {0}")]
    Preprocess(String),

    /// API misuse, e.g. backward on a non-scalar loss.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }
}

pub type CoreResult<T> = Result<T, CoreError>;
