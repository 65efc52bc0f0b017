use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid relatedness table: {0}")]
    InvalidTable(String),

    #[error("unknown emotion `{0}`")]
    UnknownEmotion(String),

    #[error("unknown action unit AU{0}")]
    UnknownAu(u32),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("activation cache does not match the current parameters")]
    StaleCache,

    #[error("loss closure is not deterministic: {first} then {second}")]
    NonDeterministicLoss { first: f64, second: f64 },

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}: {state}")]
    NonFiniteLoss {
        epoch: usize,
        iteration: usize,
        state: String,
    },

    #[error("epoch exhausted after {0} batches")]
    EpochExhausted(usize),

    #[error("malformed dataset file: {0}")]
    MalformedData(String),

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
