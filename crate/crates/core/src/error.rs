use crate::graph::NodeId;
use thiserror::Error;

/// Errors produced by graph construction, evaluation and search.
#[derive(Error, Debug)]
pub enum CoreError {
    #[error("shape mismatch at node {node}: expected {expected}, got {actual}")]
    ShapeMismatch {
        node: NodeId,
        expected: String,
        actual: String,
    },

    #[error("unknown operation `{0}`")]
    UnknownOp(String),

    #[error("node {0} not found")]
    NodeNotFound(NodeId),

    #[error("non-finite value first observed at node {node} during {phase}")]
    NonFinite { node: NodeId, phase: &'static str },

    #[error("parameter `{0}` missing from store")]
    MissingParam(String),

    #[error("activation for node {0} missing; run forward first")]
    MissingActivation(NodeId),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("negative learning rate {0}")]
    NegativeLearningRate(f64),

    #[error("weak learning diverged: {0}")]
    Diverged(String),

    #[error("checkpoint corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported schema `{found}`, expected `{expected}`")]
    SchemaMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
