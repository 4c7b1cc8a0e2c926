//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by graph ingestion, model evaluation, and attack stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("ragged feature rows: row {row} has {got} columns, expected {expected}")]
    RaggedFeatures { row: usize, got: usize, expected: usize },

    #[error("label set is not dense: {msg}")]
    InvalidLabels { msg: String },

    #[error("edge references node {node} but only {nodes} feature rows were given")]
    EdgeOutOfRange { node: usize, nodes: usize },

    #[error("node id {node} out of range (graph has {nodes} nodes)")]
    NodeOutOfRange { node: usize, nodes: usize },

    #[error("invalid parameter: {msg}")]
    InvalidParameter { msg: String },

    #[error("dimension mismatch: {msg}")]
    DimensionMismatch { msg: String },

    #[error("empty input: {msg}")]
    EmptyInput { msg: String },

    #[error("input is not a probability simplex: {msg}")]
    NotASimplex { msg: String },

    #[error("centroid for label {label} is absent (no samples)")]
    AbsentCentroid { label: usize },

    #[error("non-finite value encountered during {stage}")]
    NonFinite { stage: String },

    #[error("no poisoned candidate passes the degree filter for label {label} (threshold {threshold})")]
    NoCandidates { label: usize, threshold: usize },

    #[error("attack requires at least 2 labels, graph has {labels}")]
    SingleLabel { labels: usize },

    #[error("warm-up degenerates the label set: only {represented} of {labels} labels remain represented")]
    WarmupDegenerate { represented: usize, labels: usize },

    #[error("black-box pipeline supports only the invoke trigger method, got {got}")]
    BlackBoxMethod { got: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {msg}")]
    Config { msg: String },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an error with the experiment stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
