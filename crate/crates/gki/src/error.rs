use thiserror::Error;

#[derive(Debug, Error)]
pub enum GkiError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid ICD code {value:?}: {reason}")]
    InvalidCode { value: String, reason: String },

    #[error("duplicate code {code} in knowledge base")]
    DuplicateCode { code: String },

    #[error("malformed knowledge base row at line {line}: {reason}")]
    MalformedKbRow { line: usize, reason: String },

    #[error("unknown code {code}{context}")]
    UnknownCode { code: String, context: String },

    #[error("malformed corpus line {line} in {path}: {reason}")]
    MalformedCorpusLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("duplicate document id {id}")]
    DuplicateDocumentId { id: String },

    #[error("document {id} is empty after tokenization")]
    EmptyDocument { id: String },

    #[error("label vector length {got} does not match label space size {expected}")]
    LabelLengthMismatch { got: usize, expected: usize },

    #[error("invalid synthetic spec: {reason}")]
    InvalidSpec { reason: String },

    #[error("invalid config: {reason}")]
    InvalidConfig { reason: String },

    #[error("shape mismatch: {reason}")]
    ShapeMismatch { reason: String },

    #[error("non-finite loss at step {step} (samples: {sample_ids:?})")]
    NonFiniteLoss { step: usize, sample_ids: Vec<String> },

    #[error("checkpoint error: {reason}")]
    Checkpoint { reason: String },

    #[error("encoder {name:?} is not available in this build; use the tiny transformer")]
    UnsupportedEncoder { name: String },

    #[error("unknown document id {id}")]
    UnknownDocument { id: String },
}

pub type Result<T> = std::result::Result<T, GkiError>;

impl GkiError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        GkiError::Io {
            path: path.into(),
            source,
        }
    }
}
