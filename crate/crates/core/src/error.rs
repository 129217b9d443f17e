use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the diagnostics pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed NPY header or payload; `field` names the offending header key or section.
    #[error("{path}: invalid npy {field}: {reason}")]
    Npy {
        path: PathBuf,
        field: &'static str,
        reason: String,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value {value} at row {row}, col {col}")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },

    #[error("{name} = {value} out of range: {expected}")]
    OutOfRange {
        name: &'static str,
        value: String,
        expected: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("node {node} has zero distance to its k-th neighbour; deduplicate or jitter the input")]
    ZeroScale { node: usize },

    #[error("no class has at least {needed} samples")]
    NoRetainableClass { needed: usize },

    #[error("node {0} is isolated")]
    IsolatedNode(usize),

    #[error("eigen-decomposition failed: {0}")]
    Eigen(String),

    #[error("spectrum has {excluded} near-zero eigenvalues but the graph has {components} components")]
    ZeroCountMismatch { excluded: usize, components: usize },

    #[error("transport problem infeasible: {0}")]
    Infeasible(String),

    #[error("simplex budget exceeded: {count} simplices > {budget}; subsample or project the points")]
    SimplexBudget { count: usize, budget: usize },

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("report schema version {found}, expected {expected}")]
    Schema { found: String, expected: u32 },

    #[error("missing accuracy for checkpoint {0}")]
    MissingAccuracy(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn range(
        name: &'static str,
        value: impl ToString,
        expected: impl Into<String>,
    ) -> Self {
        Error::OutOfRange {
            name,
            value: value.to_string(),
            expected: expected.into(),
        }
    }
}
