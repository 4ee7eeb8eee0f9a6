use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("trace line {line}: {msg}")]
    TraceLine { line: usize, msg: String },
    #[error("rewards must not be empty")]
    EmptyRewards,
    #[error("out-of-order append: {acknowledged} tokens acknowledged, got prev_token_count {got}")]
    OutOfOrder { acknowledged: u32, got: u32 },
    #[error("kv pool capacity exhausted: {0}")]
    Capacity(String),
    #[error("malformed draft delta: {0}")]
    Delta(String),
    #[error("wire protocol error: {0}")]
    Wire(String),
    #[error("simulation error: {0}")]
    Sim(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
