use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by the subsystem that raises them; the CLI maps them
/// onto stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    // -- tensors and layers
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot broadcast {rhs:?} onto {lhs:?}")]
    Broadcast { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid axis {axis} for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("loss is not connected to any tensor that requires a gradient")]
    NoGraph,
    #[error("invalid probability {name} = {value}")]
    InvalidProbability { name: &'static str, value: f64 },

    // -- models and configuration
    #[error("configuration error: {0}")]
    Config(String),
    #[error("selector `{0}` matched no parameters")]
    Selector(String),

    // -- data
    #[error("metadata schema error: missing required column `{column}`")]
    Schema { column: String },
    #[error("metadata integrity error at row {row}: {message}")]
    Integrity { row: usize, message: String },
    #[error("both classes must be present: {0}")]
    ClassMissing(String),
    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    // -- splitting
    #[error(
        "the number of distinct groups ({groups}) has to be at least equal to the number of folds ({folds})"
    )]
    InsufficientGroups { groups: usize, folds: usize },
    #[error("index {index} out of range (limit {limit})")]
    Index { index: usize, limit: usize },

    // -- training and checkpoints
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("training diverged at fold {fold}, epoch {epoch}: loss = {loss}")]
    Divergence { fold: usize, epoch: usize, loss: f64 },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint incompatible with model: {0}")]
    Compatibility(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
