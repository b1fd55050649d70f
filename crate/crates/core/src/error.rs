use thiserror::Error;

/// Errors raised by model construction, simulation and the learning routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed model: {0}")]
    Shape(String),

    #[error("policy undefined at layer {layer}, observation {observation}")]
    PolicyUndefined { layer: usize, observation: usize },

    #[error("layer mismatch: {0}")]
    LayerMismatch(String),

    #[error("model has no reward table")]
    MissingReward,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("enumeration guard exceeded: {count} policies (limit {limit})")]
    GuardExceeded { count: f64, limit: f64 },

    #[error("environment is not tabular: {0}")]
    NotTabular(String),

    #[error("environment lacks the composability property")]
    NotComposable,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
