use std::path::PathBuf;

use crate::types::Modality;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("item {id}: fields inconsistent with modality {modality}: {detail}")]
    ModalityMismatch {
        id: String,
        modality: Modality,
        detail: String,
    },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("text has no tokens after splitting")]
    EmptyText,
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch for {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("encoded vector for {0:?} has zero norm")]
    ZeroVector(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("cannot build batch: {0}")]
    BatchInfeasible(String),
    #[error("sampling source {0} is empty")]
    EmptySource(&'static str),
    #[error("index is empty")]
    IndexEmpty,
    #[error("qid mismatch: {left:?} vs {right:?}")]
    QidMismatch { left: String, right: String },
    #[error("template {template_id} does not apply to {query} -> {candidate}")]
    TemplateMismatch {
        template_id: String,
        query: Modality,
        candidate: Modality,
    },
    #[error("template {template_id} needs field {field} which item {item_id} lacks")]
    MissingField {
        template_id: String,
        field: &'static str,
        item_id: String,
    },
    #[error("scorer unavailable for query {qid}: {reason}")]
    ScorerUnavailable { qid: String, reason: String },
    #[error("no relevant documents for query")]
    EmptyRelevant,
    #[error("group {0:?} has no datasets")]
    EmptyGroup(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error("{context}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            e => e,
        }
    }
}
