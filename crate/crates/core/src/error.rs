use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("gradient requested of a non-scalar output with shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("parameter node {0} is not reachable from the output")]
    NotInGraph(usize),

    #[error("output depends on node {0} only through non-differentiable paths")]
    NonDifferentiable(usize),

    #[error("sequence of length {len} exceeds max-seq-len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("token id {id} out of range for vocab of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("operation requires a {expected} model")]
    WrongMode { expected: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("negative curvature persisted after {escalations} damping escalations (last damping {damping:e}, curvature {curvature:e})")]
    NegativeCurvature {
        escalations: usize,
        damping: f64,
        curvature: f64,
    },

    #[error("missing context for ranking method {0}")]
    MissingContext(&'static str),

    #[error("{path}:{line}: {msg}")]
    Record { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("{0}")]
    Invalid(String),

    #[error("missing {what} at {path} (run `latinf {hint}` first)")]
    MissingPrerequisite {
        what: &'static str,
        path: PathBuf,
        hint: &'static str,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
