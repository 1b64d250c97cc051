//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operands have incompatible shapes; `detail` names the offending axes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument violates a precondition.
    #[error("invalid argument: {0}")]
    Validation(String),

    /// An operation was called in the wrong state (e.g. backward before
    /// forward, integer inference on an unquantized model).
    #[error("invalid state: {0}")]
    State(String),

    /// Stored data fails its own internal consistency checks.
    #[error("corrupt data: {0}")]
    Corruption(String),

    /// A replay-buffer class is full.
    #[error("replay buffer capacity exceeded for class {class_id} (capacity {capacity})")]
    Capacity { class_id: u32, capacity: usize },

    /// Training could not proceed (insufficient data, divergence).
    #[error("training failed: {0}")]
    Training(String),

    /// Mismatched configuration between components.
    #[error("configuration error: {0}")]
    Config(String),

    /// A persisted file does not match its expected format.
    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
