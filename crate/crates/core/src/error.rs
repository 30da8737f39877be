use hydra_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange {
        position: usize,
        token: u32,
        vocab: usize,
    },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("unknown adapter set `{0}`")]
    UnknownAdapterSet(String),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{op}: {what} is not finite at index {index}")]
    NonFinite {
        op: &'static str,
        what: &'static str,
        index: usize,
    },
    #[error("misaligned buffers in {op}: {detail}")]
    Misaligned { op: &'static str, detail: String },
    #[error("method `{0}` is accounted for but never executed")]
    NotExecutable(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },
    #[error("data: {0}")]
    Data(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for the errors a training loop treats as divergence.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Diverged { .. }
                | Error::Tensor(TensorError::NonFiniteNode { .. } | TensorError::NonFinite { .. })
        )
    }
}
