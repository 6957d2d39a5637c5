use crate::tier::TierId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("insufficient {tier} capacity: short by {shortfall} bytes")]
    Capacity { tier: TierId, shortfall: u64 },

    #[error("eviction pressure on {tier}: short by {shortfall} bytes after evicting all candidates")]
    Pressure { tier: TierId, shortfall: u64 },

    #[error("transient node {node} is in state {found}, expected {expected}")]
    TransientState {
        node: usize,
        expected: &'static str,
        found: &'static str,
    },

    #[error("chunk size {chunk} bytes is below the backend granularity of {min} bytes")]
    Granularity { chunk: u64, min: u64 },

    #[error("tier {0} is not configured")]
    MissingTier(TierId),

    #[error("config error: {0}")]
    Config(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("empty run: no completed requests to aggregate")]
    EmptyReport,

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
