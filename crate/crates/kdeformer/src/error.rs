use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to point at the
/// offending dimension, row or parameter without a debugger.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix entry at row {row}, col {col} is not finite")]
    NonFiniteEntry { row: usize, col: usize },

    #[error("matrix data length {got} does not match {rows}x{cols}")]
    BadDataLength { rows: usize, cols: usize, got: usize },

    #[error("attention row {row} produced a non-finite value before normalisation")]
    AttentionOverflow { row: usize },

    #[error("{context}: matrix must not be all zeros")]
    ZeroMatrix { context: &'static str },

    #[error("parameter {name} = {value} outside valid range {range}")]
    BadParameter {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("weight vector entry {index} = {value} must be positive")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("weight vector entry {index} = {value} must be nonnegative")]
    NegativeWeight { index: usize, value: f64 },

    #[error("sampling distribution has no mass (all entries zero)")]
    ZeroMass,

    #[error("{context}: value overflowed f64 at row {row}")]
    Overflow { context: &'static str, row: usize },

    #[error("empty input: {context}")]
    Empty { context: &'static str },

    #[error("block structures misaligned: queries have {q_blocks} blocks, keys have {k_blocks}")]
    BlockMismatch { q_blocks: usize, k_blocks: usize },

    #[error("hyperplane count {got} outside supported range 1..=30")]
    BadLshRank { got: usize },

    #[error("sampled index {index} out of range for {n} rows")]
    SampleIndexOutOfRange { index: usize, n: usize },

    #[error("no attention method registered under \"{name}\"")]
    UnknownMethod { name: String },
}

pub type Result<T> = std::result::Result<T, Error>;
