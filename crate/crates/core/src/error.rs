//! Error types shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor did not have the shape a layer expected.
    #[error("dimension mismatch at layer {layer} ({kind}): {msg}")]
    Dimension {
        layer: usize,
        kind: String,
        msg: String,
    },

    /// Bad caller-supplied data (labels out of range, empty batches, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An inconsistent configuration (empty codebook, layer group selecting
    /// no layers, misused regularizer kind, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A malformed data or checkpoint file. `offset` is the byte position at
    /// which the file stopped making sense.
    #[error("{path}: format error at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    /// The training objective became non-finite.
    #[error("training diverged at epoch {epoch}, batch {batch}: objective = {value}")]
    Diverged {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
