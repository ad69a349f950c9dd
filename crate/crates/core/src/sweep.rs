//! Error-threshold sweeps: encode a sample set at several early-termination
//! thresholds and report achieved sparsity, cache size, and error per
//! threshold.

use crate::csr::{pack, ValueMode};
use crate::dict::Dictionary;
use crate::error::{Error, Result};
use crate::omp::{omp_batch, OmpConfig};
use crate::tensor::DenseMatrix;

/// One sweep line: what a threshold buys and what it costs.
#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub delta: f32,
    pub mean_sparsity: f64,
    pub kv_size_percent: f64,
    pub mean_rel_error: f64,
}

/// Sweep `thresholds` over `(rows, dictionary)` sample sets (typically the
/// key and value rows of each layer), overriding `base`'s threshold per
/// line. Size percent is pure-encoding: packed bytes against the FP16 dense
/// baseline, no buffer term.
pub fn threshold_sweep(
    sets: &[(&DenseMatrix, &Dictionary)],
    base: &OmpConfig,
    value_mode: ValueMode,
    thresholds: &[f32],
) -> Result<Vec<SweepRow>> {
    if thresholds.is_empty() {
        return Err(Error::Config("threshold list is empty".into()));
    }
    if sets.is_empty() {
        return Err(Error::Config("no sample sets to sweep".into()));
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &delta in thresholds {
        let mut nnz = 0usize;
        let mut n_rows = 0usize;
        let mut err_sum = 0.0f64;
        let mut packed_bytes = 0usize;
        let mut full_bytes = 0usize;
        for (rows, dict) in sets {
            let cfg = OmpConfig {
                rel_error_threshold: Some(delta),
                ..base.clone()
            };
            let codes = omp_batch(rows, dict, &cfg)?;
            nnz += codes.iter().map(|c| c.nnz()).sum::<usize>();
            err_sum += codes.iter().map(|c| c.residual_rel as f64).sum::<f64>();
            n_rows += codes.len();
            packed_bytes += pack(&codes, value_mode)?.packed_byte_size();
            full_bytes += rows.rows() * rows.cols() * 2;
        }
        out.push(SweepRow {
            delta,
            mean_sparsity: nnz as f64 / n_rows as f64,
            kv_size_percent: 100.0 * packed_bytes as f64 / full_bytes as f64,
            mean_rel_error: err_sum / n_rows as f64,
        });
    }
    Ok(out)
}
