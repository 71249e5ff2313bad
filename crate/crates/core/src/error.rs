use std::path::PathBuf;

use crate::tensor_io::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("scene validation failed: {0}")]
    Validation(ValidationReport),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("scene has no valid cells")]
    EmptyScene,

    #[error("grid has a single nonempty voxel; no negative pairs exist")]
    NoNegatives,

    #[error("exhaustive enumeration would produce {count} pairs (limit {limit})")]
    TooManyPairs { count: u64, limit: u64 },

    #[error("pair set is empty")]
    EmptyPairs,

    #[error("degenerate (zero-norm) vector: {0}")]
    DegenerateVector(String),

    #[error("mask selects zero valid cells")]
    EmptyMask,

    #[error("quartile analysis needs at least 4 samples, got {0}")]
    TooFewSamples(usize),

    #[error("infeasible synthetic spec: {0}")]
    Spec(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used in CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Schema(_) => "schema",
            Error::Validation(_) => "validation",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::EmptyScene => "empty_scene",
            Error::NoNegatives => "no_negatives",
            Error::TooManyPairs { .. } => "too_many_pairs",
            Error::EmptyPairs => "empty_pairs",
            Error::DegenerateVector(_) => "degenerate_vector",
            Error::EmptyMask => "empty_mask",
            Error::TooFewSamples(_) => "too_few_samples",
            Error::Spec(_) => "spec",
            Error::Divergence { .. } => "divergence",
        }
    }

    /// Input problems map to 2, failures during computation to 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Schema(_)
            | Error::Validation(_)
            | Error::Shape(_)
            | Error::Config(_)
            | Error::Spec(_)
            | Error::TooFewSamples(_) => 2,
            _ => 3,
        }
    }
}
