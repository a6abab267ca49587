use std::path::PathBuf;

use crate::types::Label;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),

    #[error("invalid sample {id:?}: {reason}")]
    InvalidSample { id: String, reason: String },

    #[error("malformed diff at line {line}: {reason}")]
    MalformedDiff { line: usize, reason: String },

    #[error("schema error in record {index}: field `{field}` {reason}")]
    Schema {
        index: usize,
        field: String,
        reason: String,
    },

    #[error("invalid split ratios {0:?}: must be positive and sum to 1")]
    InvalidRatios([f64; 3]),

    #[error("class {0} has no samples; cannot stratify")]
    EmptyClass(Label),

    #[error("explanation service unavailable after {attempts} attempts: {last_error}")]
    ServiceUnavailable { attempts: u32, last_error: String },

    #[error("cache entry {} failed its checksum", path.display())]
    CacheCorrupt { path: PathBuf },

    #[error("invalid explainer config: {0}")]
    InvalidExplainerConfig(String),

    #[error("no precomputed embedding for sample {sample_id:?} ({modality})")]
    BackendMissingEntry { sample_id: String, modality: String },

    #[error("embedding file {}: {reason}", path.display())]
    EmbeddingFile { path: PathBuf, reason: String },

    #[error("batch needs at least {required} {class} sample(s), found {found}")]
    InsufficientClassMembers {
        class: Label,
        required: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("AUC undefined: only class {present} present")]
    SingleClass { present: Label },

    #[error("training diverged at epoch {epoch}; last good checkpoint: {last_good:?}")]
    DivergenceDetected {
        epoch: usize,
        last_good: Option<PathBuf>,
    },

    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
