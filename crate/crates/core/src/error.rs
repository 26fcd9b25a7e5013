//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong across the tensor core, graph generation,
/// model, and evaluation paths. Variants carry enough context to name the
/// offending shape, index, or component in the message.
#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that had to agree did not.
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single shape is unusable for the requested operation.
    #[error("invalid shape {shape:?} for {context}: {reason}")]
    InvalidShape {
        context: String,
        shape: Vec<usize>,
        reason: String,
    },

    /// A node id referenced a node outside the graph.
    #[error("node index {index} out of range for a graph with {nodes} nodes")]
    NodeOutOfRange { index: usize, nodes: usize },

    /// A class label referenced a class outside the classifier range.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// Batch norm was asked to run in evaluation mode before its running
    /// statistics were ever populated (by training or explicit seeding).
    #[error("uninitialized running statistics: batch norm `{0}` used in evaluation mode before any update")]
    UninitializedRunningStats(String),

    /// Two parameters were registered under the same name.
    #[error("duplicate parameter name `{0}`")]
    DuplicateParamName(String),

    /// An optimizer step was taken before any backward pass populated
    /// gradients.
    #[error("optimizer step on unpopulated gradients (run backward first)")]
    UnpopulatedGradients,

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// No anchor in a triplet batch had both a positive and a negative.
    #[error("no anchor in the batch has both a valid positive and a valid negative")]
    NoValidTriplets,

    /// Retrieval evaluation found no query with any valid gallery match.
    #[error("no query has a valid cross-camera gallery match")]
    NoValidQueries,

    /// Cosine distance is undefined for a zero vector.
    #[error("zero vector under the cosine metric at {set} sample {index}")]
    ZeroVectorCosine { set: &'static str, index: usize },

    /// Bad configuration value, unknown key, or malformed config line.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed checkpoint data.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Catch-all for precondition violations not covered above.
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
