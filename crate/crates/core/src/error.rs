use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("requested {requested} permutations but only {available} distinct non-identity orderings exist")]
    Capacity { requested: usize, available: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("manifest {0} contains no records")]
    EmptyManifest(PathBuf),

    #[error("inconsistent dataset: {0}")]
    Consistency(String),

    #[error("stratification failed: {0}")]
    Stratification(String),

    #[error("labeled-fraction selection failed: {0}")]
    Selection(String),

    #[error("degenerate class weights: {0}")]
    DegenerateWeights(String),

    #[error("unknown encoder descriptor `{0}`")]
    UnknownEncoder(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite {phase} loss at iteration {iteration}")]
    Divergence { phase: &'static str, iteration: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("model lacks capability: {0}")]
    Capability(String),

    #[error("probability vector is not normalized (sum = {0})")]
    NotNormalized(f64),

    #[error("both classes must be present")]
    SingleClass,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
