use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum AmorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("log of non-positive value {value}")]
    LogDomain { value: f64 },

    #[error("top-k with k={k} exceeds last dimension {n}")]
    TopKTooLarge { k: usize, n: usize },

    #[error("cross-entropy mask selects no positions")]
    EmptyMask,

    #[error("task config error: {0}")]
    TaskConfig(String),

    #[error("oracle gate mode requires needs_retrieval labels")]
    MissingOracleLabels,

    #[error("non-finite gradient in parameter {param} at step {step}")]
    NanGradient { param: String, step: usize },

    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("config key {0:?} is not recognized")]
    UnknownConfigKey(String),

    #[error("config value for {key:?} is invalid: {msg}")]
    BadConfigValue { key: String, msg: String },

    #[error("results file failed schema validation: {0}")]
    SchemaViolation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AmorError>;
