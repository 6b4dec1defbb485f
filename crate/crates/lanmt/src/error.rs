use thiserror::Error;

/// Errors produced by corpus handling, model evaluation, training and IO.
#[derive(Debug, Error)]
pub enum LanmtError {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("malformed corpus line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    IdOutOfVocab { id: u32, vocab_size: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {component}: {detail}")]
    NonFinite { component: String, detail: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {artifact} not found at {path}; run `lanmt {command}` first")]
    MissingArtifact {
        artifact: String,
        path: String,
        command: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LanmtError>;
