//! Crate-wide error type. Variants are split so the CLI can map
//! configuration problems and runtime failures to different exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad shapes fed to a graph op.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// NaN (or comparable numeric failure) produced by a graph node.
    #[error("numeric failure at node {node} ({op}): {detail}")]
    Numeric {
        node: usize,
        op: &'static str,
        detail: String,
    },

    /// Checkpointed function returned different bits on re-execution.
    #[error("checkpointed function is impure: recomputed output differs at node {node}")]
    CheckpointImpure { node: usize },

    /// Invalid configuration or invalid arguments to an operation.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed input file.
    #[error("parse error in {path} at line {line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    /// Missing or malformed artifact (checkpoint, dataset file).
    #[error("artifact error: {0}")]
    Artifact(String),

    /// Training diverged or violated a runtime contract.
    #[error("training failure at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input (config, malformed files),
    /// as opposed to runtime failures. The CLI maps this to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse { .. })
    }
}
