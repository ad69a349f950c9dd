//! Sparse-coding compression for transformer key/value caches.
//!
//! Head-dimension vectors are approximated as sparse linear combinations of
//! atoms from learned per-layer dictionaries (orthogonal matching pursuit),
//! packed into a byte-exact CSR layout with FP8/FP16 coefficients, and
//! served through a buffered prefill/decode attention path that works
//! directly on the compressed codes.
//!
//! Module map:
//! * [`tensor`] - dense vectors/matrices and the reductions everything else
//!   computes with
//! * [`omp`] - naive and Cholesky-accelerated batched orthogonal matching
//!   pursuit with relative-error early termination
//! * [`dict`] - dictionary initialization, training, and the on-disk format
//! * [`fp8`], [`csr`] - coefficient quantization and CSR block packing
//! * [`engine`] - the compressed-cache state machine (prefill, buffered
//!   decode, adaptive dictionary growth)
//! * [`analysis`] - reference attention, brute-force sparse oracle,
//!   synthetic subspace-mixture data, similarity maps
//! * [`sweep`] - error-threshold sweeps over a sample set
//! * [`dump`] - the tensor-dump interchange format

pub mod analysis;
pub mod csr;
pub mod dict;
pub mod dump;
pub mod engine;
pub mod error;
pub mod fp8;
pub mod omp;
pub mod sweep;
pub mod tensor;
pub mod testutil;

pub use csr::{memory_stats, pack, unpack, CsrBlock, MemoryStats, ValueMode};
pub use dict::{
    init_dictionary, project_tangent, train_dictionary, train_step, DictRole, Dictionary,
    TrainConfig, TrainReport,
};
pub use engine::{CacheConfig, CompressedKvState, DecodeOutput};
pub use error::{Error, Result};
pub use fp8::{decode_fp8, encode_fp8};
pub use omp::{omp_batch, omp_naive, reconstruct, relative_error, OmpConfig, SparseCode};
pub use tensor::{DenseMatrix, DenseVector};
