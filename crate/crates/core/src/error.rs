//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enum. Variants map onto the CLI exit-code table, so new
/// failure modes should reuse an existing variant where the meaning fits.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the attempted operation.
    #[error("shape error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An API precondition was violated (wrong tape, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric argument is outside its valid domain (t = 0, sigma <= 0, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A token id that is not part of the vocabulary.
    #[error("unknown token id {id} (vocabulary size {vocab})")]
    UnknownToken { id: usize, vocab: usize },

    /// Invalid synthetic-data request (too few items, frame does not fit, ...).
    #[error("data error: {0}")]
    Data(String),

    /// The algorithm cannot run on the given inputs (e.g. no reference items).
    #[error("method error: {0}")]
    Method(String),

    /// An operation produced NaN or Inf.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// A training loop tripped the divergence guard.
    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    /// An evaluation probe could not produce a meaningful value.
    #[error("metric error: {0}")]
    Metric(String),

    /// A self-check harness (finite differences, derivation check) misbehaved.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// A serialized artifact is malformed (truncated blob, bad manifest, ...).
    #[error("format error: {0}")]
    Format(String),

    /// A serialized artifact uses a schema version this build does not know.
    #[error("unsupported schema version {found} (this build reads version {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    /// A required input artifact does not exist on disk.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// A run configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A verification command found a violated identity.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
