use std::path::PathBuf;

use crate::model::AgentId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("agent name must be non-empty")]
    EmptyAgentName,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown agent `{0}`")]
    UnknownAgent(AgentId),

    #[error("empty sample set")]
    EmptySamples,

    #[error("no converged agent distributions")]
    NoConvergedAgents,

    #[error("request {0} is not assigned to this ledger")]
    UnknownRequest(u64),

    #[error("commit rejected: slot {slot} would exceed capacity")]
    CommitExceeds { slot: i64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
