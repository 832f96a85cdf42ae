use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum SurtError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid lattice input: {0}")]
    Lattice(String),

    #[error("path enumeration guard exceeded: T + U = {0} > 12")]
    EnumerationGuard(usize),

    #[error("three-way overlap at frame {frame}")]
    ThreeWayOverlap { frame: usize },

    #[error("relative speaker label overflow: {needed} labels needed, K_max = {k_max}")]
    LabelOverflow { needed: usize, k_max: usize },

    #[error("invalid utterance: {0}")]
    Utterance(String),

    #[error("mixing failed: {0}")]
    Mixing(String),

    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("scoring error: {0}")]
    Score(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SurtError>;

impl SurtError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SurtError::Io {
            path: path.into(),
            source,
        }
    }
}
