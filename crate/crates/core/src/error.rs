use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeptError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("out-of-vocabulary local token: {0}")]
    OutOfVocabulary(String),
    #[error("trim/dataset inconsistency: {0}")]
    TrimInconsistency(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("inconsistent inputs: {0}")]
    InconsistentInputs(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DeptError> = std::result::Result<T, E>;
