use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A point cloud or labeling violates its invariants.
    #[error("validation failed at point {index}: {reason}")]
    Validation { index: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Caller passed inputs whose shapes or preconditions disagree.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("cannot place {class}: scene too crowded after {attempts} attempts")]
    Capacity { class: String, attempts: usize },
    #[error("no point of the scene falls inside the voxel grid")]
    EmptyScene,
    #[error("non-finite value produced by {0}")]
    Numeric(String),
}

pub type Result<T> = core::result::Result<T, Error>;
