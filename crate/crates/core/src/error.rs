//! Error type shared by every module of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An input value is NaN or infinite where a finite value is required.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An atom index points past the end of a dictionary.
    #[error("atom index {index} out of range for dictionary width {width}")]
    IndexOutOfRange { index: usize, width: usize },

    /// An atom index does not fit the 16-bit on-disk encoding.
    #[error("atom index {0} exceeds the u16 index range")]
    IndexOverflow(usize),

    /// A byte pattern that has no value in the target encoding.
    #[error("invalid encoding: {0}")]
    InvalidEncoding(String),

    /// Serialized data fails an internal consistency check.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    /// A configuration violates its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// A brute-force oracle was asked for an infeasible enumeration.
    #[error("combinatorial guard exceeded: {0}")]
    CombinatorialGuard(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
