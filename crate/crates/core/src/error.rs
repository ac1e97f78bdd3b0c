use thiserror::Error;

/// Errors surfaced by the pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("line {line}: malformed record: {detail}")]
    MalformedLine { line: usize, detail: String },
    #[error("line {line}: unknown behaviour \"{value}\"")]
    UnknownBehaviour { line: usize, value: String },
    #[error("dataset exhausted by filtering (min_count = {min_count})")]
    DatasetExhausted { min_count: usize },
    #[error("unknown id: {0}")]
    UnknownId(String),
    #[error("node index {index} out of range ({kind} count = {count})")]
    NodeOutOfRange {
        kind: &'static str,
        index: usize,
        count: usize,
    },
    #[error("user {user}: only {available} eligible negative items, need {needed}")]
    NegativeShortfall {
        user: String,
        available: usize,
        needed: usize,
    },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("dimension must be even, got {0}")]
    OddDimension(usize),
    #[error("width mismatch: {left} vs {right}")]
    WidthMismatch { left: usize, right: usize },
    #[error("empty readout set")]
    EmptyReadoutSet,
    #[error("numerical overflow at node {0}")]
    NonFinite(String),
    #[error("remote agent L{layer},{agent}: {detail}")]
    RemoteAgent {
        layer: usize,
        agent: usize,
        detail: String,
    },
    #[error("shape mismatch: expected {expected} rows, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {got}, supported {supported}")]
    CheckpointVersion { got: u32, supported: u32 },
    #[error("checkpoint dimension {file_d} does not match configured {config_d}")]
    DimensionMismatch { file_d: usize, config_d: usize },
    #[error("unknown endpoint in cost log: {0}")]
    UnknownEndpoint(String),
    #[error("positive item missing from scored candidates")]
    PositiveMissing,
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
