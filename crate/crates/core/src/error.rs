use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("node {0} has not been evaluated")]
    NotEvaluated(usize),
    #[error("no binding for leaf `{0}`")]
    MissingBinding(String),
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite force at step {step}")]
    NonFiniteForce { step: usize },
    #[error("non-finite bias output for particle {particle}")]
    NonFiniteBias { particle: usize },
    #[error("degenerate point cloud: {0}")]
    Degenerate(String),
    #[error("k-means produced an empty cluster after {0} reseeds")]
    EmptyCluster(usize),
    #[error("singular normal equations in manifold fit")]
    Singular,
    #[error("rollout {index}: {source}")]
    Rollout {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("non-finite loss at rollout {rollout}, epoch {epoch}")]
    NonFiniteLoss { rollout: usize, epoch: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
