use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("instance {id}: {message}")]
    Validation { id: String, message: String },

    #[error("duplicate instance id {0}")]
    Conflict(String),

    #[error("non-finite score {score} for unit {unit}")]
    NonFinite { unit: String, score: f64 },

    #[error("model does not support {0}")]
    UnsupportedCapability(&'static str),

    #[error("model unavailable: {0}")]
    ModelUnavailable(String),

    #[error("input of {len} tokens exceeds model capacity {limit}")]
    Capacity { len: usize, limit: usize },

    #[error("protocol error in field `{field}`: {message}")]
    Protocol { field: String, message: String },

    #[error("adapter error {code}: {message}")]
    Remote { code: String, message: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{players} players exceed the exact enumeration cap {cap}; use kernel_shap")]
    EnumerationCap { players: usize, cap: usize },

    #[error("training diverged (lr={lr}, l2={l2}, epochs={epochs}, batch={batch})")]
    Training { lr: f64, l2: f64, epochs: usize, batch: usize },

    #[error("no instance has usable gold annotations")]
    EmptyEvaluation,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status for a run that stopped with this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) => 2,
            Error::UnsupportedCapability(_) => 3,
            Error::ModelUnavailable(_) | Error::Protocol { .. } | Error::Remote { .. } => 5,
            _ => 4,
        }
    }

    pub(crate) fn validation(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { id: id.into(), message: message.into() }
    }

    pub(crate) fn protocol(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Protocol { field: field.into(), message: message.into() }
    }
}
