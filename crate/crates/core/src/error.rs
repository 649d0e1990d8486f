use thiserror::Error;

/// Errors raised anywhere in the crashground core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("scenario `{id}`: invalid {field}: {message}")]
    Validation {
        id: String,
        field: String,
        message: String,
    },

    #[error("agent {agent} is not valid at step {step}")]
    InvalidAgentState { agent: usize, step: usize },

    #[error("agent index {index} out of range (scenario has {count} agents)")]
    AgentIndex { index: usize, count: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate projection: pre-normalization norm {norm:e}")]
    DegenerateProjection { norm: f64 },

    #[error("non-unit embedding at row {row}: norm {norm}")]
    NonUnit { row: usize, norm: f64 },

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
