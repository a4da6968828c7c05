use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus line {line}: {message}")]
    CorpusParse { line: usize, message: String },

    #[error("duplicate tool id {id:?} on line {line}")]
    DuplicateTool { id: String, line: usize },

    #[error("unknown tool id {0:?}")]
    UnknownTool(String),

    #[error("index is empty")]
    EmptyIndex,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("embedding failed for tool {tool_id:?}: {message}")]
    Embedding { tool_id: String, message: String },

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("request to {endpoint} failed after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },

    #[error("malformed response from {endpoint}: {message}")]
    BadResponse { endpoint: String, message: String },

    #[error("index cache is corrupt: {0}")]
    CacheCorrupt(String),

    #[error("provenance mismatch: expected {expected}, found {found}")]
    ProvenanceMismatch { expected: String, found: String },

    #[error("planner turn {turn}: {message}")]
    Parse { turn: usize, message: String },

    #[error("planner reply could not be parsed after {attempts} attempt(s): {message}; raw reply: {raw:?}")]
    PlannerReply {
        attempts: u32,
        message: String,
        raw: String,
    },

    #[error("planner protocol violation: {0}")]
    Protocol(String),

    #[error("dataset {0:?} has no category mapping")]
    UnmappedDataset(String),

    #[error("record {record}: {reason}")]
    Skipped { record: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
