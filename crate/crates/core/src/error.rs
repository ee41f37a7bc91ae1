use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty scene: {0}")]
    EmptyScene(String),

    #[error("simplex violation for agent {agent_id} at timestep {timestep}: {reason}")]
    SimplexViolation {
        agent_id: String,
        timestep: i64,
        reason: String,
    },

    #[error("invariant violation for agent {agent_id} at timestep {timestep}: {reason}")]
    Invariant {
        agent_id: String,
        timestep: i64,
        reason: String,
    },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("not positive semi-definite: {0}")]
    NotPsd(String),

    #[error("unknown agent: {0}")]
    UnknownAgent(String),

    #[error("too few scenes: need at least {needed}, got {got}")]
    TooFewScenes { needed: usize, got: usize },

    #[error("missing ground-truth class for agent {0}")]
    MissingTrueClass(String),

    #[error("no eligible samples: {0}")]
    NoEligibleSamples(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
