use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input")]
    NonFinite,
    #[error("graph consumed")]
    GraphConsumed,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("context overflow: {len} tokens exceeds limit of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("action {action} out of range for {n_actions} actions")]
    InvalidAction { action: usize, n_actions: usize },
    #[error("episode already done")]
    EpisodeDone,
    #[error("insufficient distinct tasks: requested {requested}, available {available}")]
    InsufficientTasks { requested: usize, available: usize },
    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("missing decision for episode {episode} step {step}")]
    MissingDecision { episode: usize, step: usize },
    #[error("empty window")]
    EmptyWindow,
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated record")]
    TruncatedRecord,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("action space mismatch: model has {model} actions, environment has {env}")]
    ActionSpaceMismatch { model: usize, env: usize },
    #[error("demonstration length mismatch: expected {expected} steps, got {got}")]
    DemoLengthMismatch { expected: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
