//! The compressed KV cache state machine.
//!
//! Prefill compresses all but the newest `n_b` rows into CSR blocks; decode
//! steps append the incoming token to a full-precision FIFO buffer, compute
//! attention jointly over the compressed and buffered regions, and evict the
//! oldest `n_a` buffered rows into the blocks once the buffer overflows.
//!
//! Scores for the compressed region are computed query-first: `(q D_k)` once
//! (O(Nm)), then against each row's sparse code (O(s) per row). The value
//! side mirrors the trick: sparse scores-times-codes first, then one product
//! with the value dictionary, instead of reconstructing `V_hat`. Both orders
//! are algebraically equal to attention over the reconstructed cache; the
//! test suite holds the engine to that identity.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::time::{Duration, Instant};

use crate::csr::{self, CsrBlock, MemoryStats, ValueMode};
use crate::dict::{DictRole, Dictionary};
use crate::error::{Error, Result};
use crate::omp::{omp_batch, omp_cholesky_row, OmpConfig, SparseCode};
use crate::tensor::{dot_slices, l2_norm_slice, DenseMatrix, DenseVector};

/// Maximum dictionary width representable by the 16-bit index encoding.
const MAX_DICT_WIDTH: usize = u16::MAX as usize + 1;

/// Cache behavior knobs. `approx_window` (n_a) rows are compressed whenever
/// the buffer exceeds `buffer_len` (n_b).
#[derive(Debug, Clone, PartialEq)]
pub struct CacheConfig {
    pub sparsity: usize,
    pub buffer_len: usize,
    pub approx_window: usize,
    pub rel_error_threshold: Option<f32>,
    pub adaptive: bool,
    /// Adaptive growth also applies during prefill. Off by default: the
    /// adaptive scheme is demonstrated at generation time.
    pub adaptive_prefill: bool,
    pub max_adaptive_atoms: usize,
    pub value_mode: ValueMode,
}

impl CacheConfig {
    pub fn new(sparsity: usize) -> Self {
        Self {
            sparsity,
            buffer_len: 128,
            approx_window: 1,
            rel_error_threshold: None,
            adaptive: false,
            adaptive_prefill: false,
            max_adaptive_atoms: 0,
            value_mode: ValueMode::Fp8E4M3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sparsity == 0 {
            return Err(Error::Config("sparsity must be >= 1".into()));
        }
        if self.approx_window == 0 {
            return Err(Error::Config("approx_window must be >= 1".into()));
        }
        if self.approx_window > self.buffer_len.max(1) {
            return Err(Error::Config(format!(
                "approx_window {} exceeds max(buffer_len, 1) = {}",
                self.approx_window,
                self.buffer_len.max(1)
            )));
        }
        if let Some(d) = self.rel_error_threshold {
            if d.is_nan() || d <= 0.0 || d > 1.0 {
                return Err(Error::Config(format!(
                    "rel_error_threshold {d} outside (0, 1]"
                )));
            }
        }
        if self.adaptive && self.rel_error_threshold.is_none() {
            return Err(Error::Config(
                "adaptive mode requires rel_error_threshold".into(),
            ));
        }
        Ok(())
    }

    pub fn omp_config(&self) -> OmpConfig {
        OmpConfig {
            max_sparsity: self.sparsity,
            rel_error_threshold: self.rel_error_threshold,
            batch_rows: 64,
        }
    }
}

/// One attention step's result: the head output and the post-softmax
/// weights over every cached token (compressed, buffered, and current).
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub attention_out: DenseVector,
    pub scores: DenseVector,
}

/// Wall-clock split of one decode step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepTimings {
    /// Score + output computation (the attention path).
    pub attention: Duration,
    /// OMP compression of evicted buffer rows.
    pub eviction: Duration,
}

/// Compressed cache for a single (layer, head) stream.
#[derive(Debug, Clone)]
pub struct CompressedKvState {
    cfg: CacheConfig,
    dict_k: Dictionary,
    dict_v: Dictionary,
    k_block: CsrBlock,
    v_block: CsrBlock,
    k_buffer: VecDeque<Vec<f32>>,
    v_buffer: VecDeque<Vec<f32>>,
    token_count: usize,
    adaptive_atoms_k: usize,
    adaptive_atoms_v: usize,
    budget_exhausted_rows: usize,
}

impl CompressedKvState {
    /// Compress a prompt's K/V rows. Rows `[0, l_seq - n_b)` go through OMP
    /// into the blocks; the newest `min(n_b, l_seq)` rows stay buffered.
    pub fn prefill(
        keys: &DenseMatrix,
        values: &DenseMatrix,
        dict_k: Dictionary,
        dict_v: Dictionary,
        cfg: CacheConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if keys.rows() != values.rows() || keys.cols() != values.cols() {
            return Err(Error::Dimension(format!(
                "K {}x{} vs V {}x{}",
                keys.rows(),
                keys.cols(),
                values.rows(),
                values.cols()
            )));
        }
        let m = keys.cols();
        if dict_k.head_dim() != m || dict_v.head_dim() != m {
            return Err(Error::Dimension(format!(
                "head_dim {m} vs dictionaries {} / {}",
                dict_k.head_dim(),
                dict_v.head_dim()
            )));
        }
        cfg.omp_config().validate(&dict_k)?;
        cfg.omp_config().validate(&dict_v)?;

        let l_seq = keys.rows();
        let n_compress = l_seq.saturating_sub(cfg.buffer_len);
        let mut state = Self {
            k_block: CsrBlock::empty(cfg.value_mode),
            v_block: CsrBlock::empty(cfg.value_mode),
            cfg,
            dict_k,
            dict_v,
            k_buffer: VecDeque::new(),
            v_buffer: VecDeque::new(),
            token_count: 0,
            adaptive_atoms_k: 0,
            adaptive_atoms_v: 0,
            budget_exhausted_rows: 0,
        };

        if n_compress > 0 {
            let adaptive = state.cfg.adaptive && state.cfg.adaptive_prefill;
            let k_head = keys.row_range(0, n_compress)?;
            let v_head = values.row_range(0, n_compress)?;
            state.compress_rows(&k_head, DictRole::Key, adaptive)?;
            state.compress_rows(&v_head, DictRole::Value, adaptive)?;
        }
        for i in n_compress..l_seq {
            state.k_buffer.push_back(keys.row(i).to_vec());
            state.v_buffer.push_back(values.row(i).to_vec());
        }
        state.token_count = l_seq;
        Ok(state)
    }

    /// Encode rows for one role and append them to its block, growing the
    /// dictionary on threshold misses when `adaptive` is set. Adaptive
    /// encoding is sequential: later rows must see atoms grown for earlier
    /// ones.
    fn compress_rows(&mut self, rows: &DenseMatrix, role: DictRole, adaptive: bool) -> Result<()> {
        let codes = if adaptive {
            let mut codes = Vec::with_capacity(rows.rows());
            for i in 0..rows.rows() {
                codes.push(self.encode_adaptive(rows.row(i).to_vec(), role)?);
            }
            codes
        } else {
            omp_batch(rows, self.dict(role), &self.cfg.omp_config())?
        };
        self.block_mut(role).append_codes(&codes)
    }

    fn dict(&self, role: DictRole) -> &Dictionary {
        match role {
            DictRole::Key => &self.dict_k,
            DictRole::Value => &self.dict_v,
        }
    }

    fn block_mut(&mut self, role: DictRole) -> &mut CsrBlock {
        match role {
            DictRole::Key => &mut self.k_block,
            DictRole::Value => &mut self.v_block,
        }
    }

    /// OMP-encode one row; on a threshold miss in adaptive mode, fall back
    /// to dictionary growth.
    fn encode_adaptive(&mut self, row: Vec<f32>, role: DictRole) -> Result<SparseCode> {
        let code = omp_cholesky_row(&row, self.dict(role), &self.cfg.omp_config());
        let delta = self
            .cfg
            .rel_error_threshold
            .expect("adaptive mode validated to carry a threshold");
        if code.residual_rel <= delta {
            return Ok(code);
        }
        self.adaptive_insert_with_fallback(&row, role, Some(code))
    }

    /// Append `x / ||x||` as a new atom for `role` and return the sparsity-1
    /// code `[(new_index, ||x||)]`. Exhausted budget falls back to the best
    /// code OMP found (recomputed when not supplied), counted in
    /// `budget_exhausted_rows`. Zero vectors produce the empty code and no
    /// atom.
    pub fn adaptive_insert(&mut self, x: &DenseVector, role: DictRole) -> Result<SparseCode> {
        if !self.cfg.adaptive {
            return Err(Error::Config(
                "adaptive_insert requires cfg.adaptive".into(),
            ));
        }
        if x.len() != self.dict(role).head_dim() {
            return Err(Error::Dimension(format!(
                "vector length {} != head_dim {}",
                x.len(),
                self.dict(role).head_dim()
            )));
        }
        self.adaptive_insert_with_fallback(x.as_slice(), role, None)
    }

    fn adaptive_insert_with_fallback(
        &mut self,
        x: &[f32],
        role: DictRole,
        best_effort: Option<SparseCode>,
    ) -> Result<SparseCode> {
        let norm = l2_norm_slice(x);
        if norm < crate::omp::ZERO_INPUT_NORM {
            return Ok(SparseCode::empty());
        }
        let used = match role {
            DictRole::Key => self.adaptive_atoms_k,
            DictRole::Value => self.adaptive_atoms_v,
        };
        let width = self.dict(role).width();
        if used >= self.cfg.max_adaptive_atoms || width >= MAX_DICT_WIDTH {
            self.budget_exhausted_rows += 1;
            return Ok(best_effort
                .unwrap_or_else(|| omp_cholesky_row(x, self.dict(role), &self.cfg.omp_config())));
        }
        let atom: Vec<f32> = x.iter().map(|v| (*v as f64 / norm) as f32).collect();
        let dict = match role {
            DictRole::Key => &mut self.dict_k,
            DictRole::Value => &mut self.dict_v,
        };
        let index = dict.append_atom(&atom)?;
        match role {
            DictRole::Key => self.adaptive_atoms_k += 1,
            DictRole::Value => self.adaptive_atoms_v += 1,
        }
        Ok(SparseCode {
            entries: vec![(index, norm as f32)],
            residual_rel: 0.0,
        })
    }

    /// One autoregressive step: buffer the new token, attend over the
    /// compressed + buffered cache, then evict the oldest `n_a` rows if the
    /// buffer overflowed.
    pub fn decode_step(
        &mut self,
        q: &DenseVector,
        k_t: &DenseVector,
        v_t: &DenseVector,
    ) -> Result<DecodeOutput> {
        Ok(self.decode_step_timed(q, k_t, v_t)?.0)
    }

    /// `decode_step` with a wall-clock split between the attention path and
    /// the eviction compression.
    pub fn decode_step_timed(
        &mut self,
        q: &DenseVector,
        k_t: &DenseVector,
        v_t: &DenseVector,
    ) -> Result<(DecodeOutput, StepTimings)> {
        let m = self.dict_k.head_dim();
        for (name, v) in [("q", q), ("k_t", k_t), ("v_t", v_t)] {
            if v.len() != m {
                return Err(Error::Dimension(format!(
                    "{name} length {} != head_dim {m}",
                    v.len()
                )));
            }
        }

        self.k_buffer.push_back(k_t.as_slice().to_vec());
        self.v_buffer.push_back(v_t.as_slice().to_vec());

        let start = Instant::now();
        let pre = raw_split_scores(
            q.as_slice(),
            &self.dict_k,
            &self.k_block,
            self.k_buffer.iter().map(|r| r.as_slice()),
        );
        let weights = crate::analysis::softmax_f64(&pre);
        let n_csr = self.k_block.n_rows();

        let mut out = vec![0.0f64; m];
        if n_csr > 0 {
            // scores-first on the value side: accumulate weighted sparse
            // codes in code space, then one pass over touched value atoms
            let mut code_space = vec![0.0f64; self.dict_v.width()];
            self.v_block.for_each_entry(|row, atom, coeff| {
                code_space[atom] += weights[row] * coeff as f64;
            });
            for (j, t) in code_space.iter().enumerate() {
                if *t != 0.0 {
                    for (o, a) in out.iter_mut().zip(self.dict_v.atom(j)) {
                        *o += t * *a as f64;
                    }
                }
            }
        }
        for (w, row) in weights[n_csr..].iter().zip(&self.v_buffer) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += w * *x as f64;
            }
        }
        let output = DecodeOutput {
            attention_out: DenseVector::from_computed(out.iter().map(|v| *v as f32).collect()),
            scores: DenseVector::from_computed(weights.iter().map(|v| *v as f32).collect()),
        };
        let attention_time = start.elapsed();

        let start = Instant::now();
        if self.k_buffer.len() > self.cfg.buffer_len {
            self.evict_oldest()?;
        }
        let eviction_time = start.elapsed();

        self.token_count += 1;
        Ok((
            output,
            StepTimings {
                attention: attention_time,
                eviction: eviction_time,
            },
        ))
    }

    fn evict_oldest(&mut self) -> Result<()> {
        let n_a = self.cfg.approx_window.min(self.k_buffer.len());
        let k_rows: Vec<Vec<f32>> = self.k_buffer.drain(..n_a).collect();
        let v_rows: Vec<Vec<f32>> = self.v_buffer.drain(..n_a).collect();
        for (rows, role) in [(k_rows, DictRole::Key), (v_rows, DictRole::Value)] {
            let codes: Vec<SparseCode> = if self.cfg.adaptive {
                let mut codes = Vec::with_capacity(rows.len());
                for row in rows {
                    codes.push(self.encode_adaptive(row, role)?);
                }
                codes
            } else {
                rows.iter()
                    .map(|r| omp_cholesky_row(r, self.dict(role), &self.cfg.omp_config()))
                    .collect()
            };
            self.block_mut(role).append_codes(&codes)?;
        }
        Ok(())
    }

    /// Decompress the whole cache back to dense matrices in token order:
    /// compressed rows first, then the buffer.
    pub fn reconstruct_cache(&self) -> Result<(DenseMatrix, DenseMatrix)> {
        if self.token_count == 0 {
            return Err(Error::InvalidInput("empty cache".into()));
        }
        let k = reconstruct_region(&self.k_block, &self.dict_k, &self.k_buffer)?;
        let v = reconstruct_region(&self.v_block, &self.dict_v, &self.v_buffer)?;
        Ok((k, v))
    }

    pub fn memory_stats(&self) -> MemoryStats {
        csr::memory_stats(
            &self.k_block,
            &self.v_block,
            self.k_buffer.len(),
            self.token_count,
            self.dict_k.head_dim(),
        )
    }

    pub fn cfg(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn compressed_rows(&self) -> usize {
        self.k_block.n_rows()
    }

    pub fn buffered_rows(&self) -> usize {
        self.k_buffer.len()
    }

    pub fn dict_k(&self) -> &Dictionary {
        &self.dict_k
    }

    pub fn dict_v(&self) -> &Dictionary {
        &self.dict_v
    }

    pub fn k_block(&self) -> &CsrBlock {
        &self.k_block
    }

    pub fn v_block(&self) -> &CsrBlock {
        &self.v_block
    }

    pub fn adaptive_atoms(&self, role: DictRole) -> usize {
        match role {
            DictRole::Key => self.adaptive_atoms_k,
            DictRole::Value => self.adaptive_atoms_v,
        }
    }

    /// Rows that missed the error threshold after the atom budget ran out.
    pub fn budget_exhausted_rows(&self) -> usize {
        self.budget_exhausted_rows
    }

    /// Buffered key rows, oldest first (exact, uncompressed).
    pub fn key_buffer_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.k_buffer.iter().map(|r| r.as_slice())
    }

    /// Verify the internal counting invariants; test and debugging hook.
    pub fn check_invariants(&self) -> Result<()> {
        if self.k_block.n_rows() != self.v_block.n_rows() {
            return Err(Error::Corrupt(format!(
                "K block rows {} != V block rows {}",
                self.k_block.n_rows(),
                self.v_block.n_rows()
            )));
        }
        if self.k_buffer.len() != self.v_buffer.len() {
            return Err(Error::Corrupt("K/V buffer length mismatch".into()));
        }
        if self.token_count != self.k_block.n_rows() + self.k_buffer.len() {
            return Err(Error::Corrupt(format!(
                "token_count {} != compressed {} + buffered {}",
                self.token_count,
                self.k_block.n_rows(),
                self.k_buffer.len()
            )));
        }
        if self.k_buffer.len() > self.cfg.buffer_len.max(1) {
            return Err(Error::Corrupt(format!(
                "buffer holds {} rows, limit {}",
                self.k_buffer.len(),
                self.cfg.buffer_len
            )));
        }
        Ok(())
    }
}

fn reconstruct_region(
    block: &CsrBlock,
    dict: &Dictionary,
    buffer: &VecDeque<Vec<f32>>,
) -> Result<DenseMatrix> {
    let m = dict.head_dim();
    let rows = block.n_rows() + buffer.len();
    let mut data = Vec::with_capacity(rows * m);
    for row in block.rows() {
        let mut acc = vec![0.0f64; m];
        for (atom, coeff) in row.entries() {
            if atom >= dict.width() {
                return Err(Error::IndexOutOfRange {
                    index: atom,
                    width: dict.width(),
                });
            }
            let a = dict.atom(atom);
            let c = coeff as f64;
            for (o, ai) in acc.iter_mut().zip(a) {
                *o += c * *ai as f64;
            }
        }
        data.extend(acc.iter().map(|v| *v as f32));
    }
    for row in buffer {
        data.extend_from_slice(row);
    }
    DenseMatrix::new(data, rows, m)
}

/// Pre-softmax scores over `[K_csr | K_buffer | k_t]`, scaled by 1/sqrt(m):
/// the compressed region is scored as `(q D_k) K_csr^T` without
/// reconstructing keys.
pub fn split_scores(
    q: &DenseVector,
    dict_k: &Dictionary,
    k_block: &CsrBlock,
    k_buffer: &[DenseVector],
    k_t: &DenseVector,
) -> Result<DenseVector> {
    let m = dict_k.head_dim();
    if q.len() != m || k_t.len() != m {
        return Err(Error::Dimension(format!(
            "query/key length {} / {} != head_dim {m}",
            q.len(),
            k_t.len()
        )));
    }
    for row in k_buffer {
        if row.len() != m {
            return Err(Error::Dimension(format!(
                "buffer row length {} != head_dim {m}",
                row.len()
            )));
        }
    }
    validate_block_indices(k_block, dict_k)?;
    let rows = k_buffer
        .iter()
        .map(|r| r.as_slice())
        .chain(std::iter::once(k_t.as_slice()));
    let scores = raw_split_scores(q.as_slice(), dict_k, k_block, rows);
    Ok(DenseVector::from_computed(
        scores.iter().map(|v| *v as f32).collect(),
    ))
}

/// Every atom index in the block must resolve inside the dictionary.
fn validate_block_indices(block: &CsrBlock, dict: &Dictionary) -> Result<()> {
    let width = dict.width();
    for row in block.rows() {
        if let Some(&bad) = row.indices.iter().find(|i| **i as usize >= width) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                width,
            });
        }
    }
    Ok(())
}

/// Shared split-score kernel: query-dictionary product once, then sparse
/// dots over compressed rows, then dense dots over buffer rows.
fn raw_split_scores<'a>(
    q: &[f32],
    dict_k: &Dictionary,
    k_block: &CsrBlock,
    buffer_rows: impl Iterator<Item = &'a [f32]>,
) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let qd: Vec<f64> = (0..dict_k.width())
        .map(|j| dot_slices(q, dict_k.atom(j)))
        .collect();
    let mut scores = vec![0.0f64; k_block.n_rows()];
    k_block.for_each_entry(|row, atom, coeff| {
        scores[row] += coeff as f64 * qd[atom];
    });
    for s in &mut scores {
        *s *= scale;
    }
    for row in buffer_rows {
        scores.push(dot_slices(q, row) * scale);
    }
    scores
}

// ---- snapshot format ---------------------------------------------------------
//
// "LXKV" | version u16 | config | n_states u32 | per state:
//   layer u16 | head u16 | token_count u64 |
//   adaptive_k u32, adaptive atom payload | adaptive_v u32, payload |
//   k_block (LXCB) | v_block (LXCB) |
//   buffer_rows u32 | m u32 | K buffer f32 LE | V buffer f32 LE
//
// Base dictionaries are distributed separately (LXDC files); only atoms
// grown adaptively at run time ride along in the snapshot.

const SNAPSHOT_MAGIC: &[u8; 4] = b"LXKV";
const SNAPSHOT_VERSION: u16 = 1;

/// A state addressed by (layer, head).
#[derive(Debug, Clone)]
pub struct KeyedState {
    pub layer: u16,
    pub head: u16,
    pub state: CompressedKvState,
}

pub fn write_snapshot<W: Write>(w: &mut W, states: &[KeyedState]) -> Result<()> {
    let first = states
        .first()
        .ok_or_else(|| Error::InvalidInput("snapshot needs at least one state".into()))?;
    let cfg = &first.state.cfg;
    for ks in states {
        if ks.state.cfg != *cfg {
            return Err(Error::InvalidInput(
                "all snapshot states must share one config".into(),
            ));
        }
    }

    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    w.write_all(&(cfg.sparsity as u32).to_le_bytes())?;
    w.write_all(&(cfg.buffer_len as u32).to_le_bytes())?;
    w.write_all(&(cfg.approx_window as u32).to_le_bytes())?;
    w.write_all(&[cfg.rel_error_threshold.is_some() as u8])?;
    w.write_all(&cfg.rel_error_threshold.unwrap_or(0.0).to_le_bytes())?;
    w.write_all(&[cfg.adaptive as u8, cfg.adaptive_prefill as u8])?;
    w.write_all(&(cfg.max_adaptive_atoms as u32).to_le_bytes())?;
    w.write_all(&[cfg.value_mode.code()])?;
    w.write_all(&(states.len() as u32).to_le_bytes())?;

    for ks in states {
        let s = &ks.state;
        w.write_all(&ks.layer.to_le_bytes())?;
        w.write_all(&ks.head.to_le_bytes())?;
        w.write_all(&(s.token_count as u64).to_le_bytes())?;
        for (count, dict) in [
            (s.adaptive_atoms_k, &s.dict_k),
            (s.adaptive_atoms_v, &s.dict_v),
        ] {
            w.write_all(&(count as u32).to_le_bytes())?;
            let base = dict.width() - count;
            for j in base..dict.width() {
                for v in dict.atom(j) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        s.k_block.write_to(w)?;
        s.v_block.write_to(w)?;
        w.write_all(&(s.k_buffer.len() as u32).to_le_bytes())?;
        w.write_all(&(s.dict_k.head_dim() as u32).to_le_bytes())?;
        for buffer in [&s.k_buffer, &s.v_buffer] {
            for row in buffer {
                for v in row {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

/// Rebuild states from a snapshot, pairing each with its base dictionaries
/// via `lookup(layer, role)` and re-growing any adaptive atoms.
pub fn read_snapshot<R: Read>(
    r: &mut R,
    mut lookup: impl FnMut(u16, DictRole) -> Result<Dictionary>,
) -> Result<Vec<KeyedState>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Corrupt("bad snapshot magic".into()));
    }
    if read_u16(r)? != SNAPSHOT_VERSION {
        return Err(Error::Corrupt("unsupported snapshot version".into()));
    }
    let sparsity = read_u32(r)? as usize;
    let buffer_len = read_u32(r)? as usize;
    let approx_window = read_u32(r)? as usize;
    let has_threshold = read_u8(r)? != 0;
    let threshold = read_f32(r)?;
    let adaptive = read_u8(r)? != 0;
    let adaptive_prefill = read_u8(r)? != 0;
    let max_adaptive_atoms = read_u32(r)? as usize;
    let value_mode = ValueMode::from_code(read_u8(r)?)?;
    let cfg = CacheConfig {
        sparsity,
        buffer_len,
        approx_window,
        rel_error_threshold: has_threshold.then_some(threshold),
        adaptive,
        adaptive_prefill,
        max_adaptive_atoms,
        value_mode,
    };
    cfg.validate()
        .map_err(|e| Error::Corrupt(format!("snapshot config: {e}")))?;

    let n_states = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let layer = read_u16(r)?;
        let head = read_u16(r)?;
        let token_count = read_u64(r)? as usize;

        let mut dicts = Vec::with_capacity(2);
        let mut counts = Vec::with_capacity(2);
        for role in [DictRole::Key, DictRole::Value] {
            let mut dict = lookup(layer, role)?;
            let count = read_u32(r)? as usize;
            let m = dict.head_dim();
            for _ in 0..count {
                let mut atom = vec![0.0f32; m];
                for v in &mut atom {
                    *v = read_f32(r)?;
                }
                dict.append_atom(&atom)
                    .map_err(|e| Error::Corrupt(format!("adaptive atom: {e}")))?;
            }
            dicts.push(dict);
            counts.push(count);
        }
        let dict_v = dicts.pop().expect("two dicts");
        let dict_k = dicts.pop().expect("two dicts");

        let k_block = CsrBlock::read_from(r)?;
        let v_block = CsrBlock::read_from(r)?;
        let buffer_rows = read_u32(r)? as usize;
        let m = read_u32(r)? as usize;
        if m != dict_k.head_dim() {
            return Err(Error::Corrupt(format!(
                "snapshot head_dim {m} != dictionary {}",
                dict_k.head_dim()
            )));
        }
        let mut read_buffer = || -> Result<VecDeque<Vec<f32>>> {
            let mut buf = VecDeque::with_capacity(buffer_rows);
            for _ in 0..buffer_rows {
                let mut row = vec![0.0f32; m];
                for v in &mut row {
                    *v = read_f32(r)?;
                }
                buf.push_back(row);
            }
            Ok(buf)
        };
        let k_buffer = read_buffer()?;
        let v_buffer = read_buffer()?;

        validate_block_indices(&k_block, &dict_k)
            .map_err(|e| Error::Corrupt(format!("snapshot K block: {e}")))?;
        validate_block_indices(&v_block, &dict_v)
            .map_err(|e| Error::Corrupt(format!("snapshot V block: {e}")))?;
        let state = CompressedKvState {
            cfg: cfg.clone(),
            dict_k,
            dict_v,
            k_block,
            v_block,
            k_buffer,
            v_buffer,
            token_count,
            adaptive_atoms_k: counts[0],
            adaptive_atoms_v: counts[1],
            budget_exhausted_rows: 0,
        };
        state
            .check_invariants()
            .map_err(|e| Error::Corrupt(format!("snapshot state: {e}")))?;
        out.push(KeyedState { layer, head, state });
    }
    Ok(out)
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    let v = f32::from_le_bytes(b);
    if !v.is_finite() {
        return Err(Error::Corrupt(format!("non-finite f32 payload {v}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::reference_attention_with_scores;
    use crate::testutil;

    fn small_state(
        l_seq: usize,
        n_b: usize,
        seed: u64,
        mode: ValueMode,
    ) -> (CompressedKvState, DenseMatrix, DenseMatrix) {
        let mut rng = testutil::rng(seed);
        let m = 8;
        let dict_k = testutil::random_dictionary(&mut rng, m, 24);
        let dict_v = testutil::random_dictionary(&mut rng, m, 24);
        let keys = testutil::random_matrix(&mut rng, l_seq, m, 0.5);
        let values = testutil::random_matrix(&mut rng, l_seq, m, 0.5);
        let cfg = CacheConfig {
            sparsity: 4,
            buffer_len: n_b,
            value_mode: mode,
            ..CacheConfig::new(4)
        };
        let state = CompressedKvState::prefill(&keys, &values, dict_k, dict_v, cfg).unwrap();
        (state, keys, values)
    }

    #[test]
    fn prefill_split_counts() {
        let (state, _, _) = small_state(10, 4, 1, ValueMode::Fp16);
        assert_eq!(state.compressed_rows(), 6);
        assert_eq!(state.buffered_rows(), 4);
        assert_eq!(state.token_count(), 10);
        state.check_invariants().unwrap();

        let (short, keys, values) = small_state(3, 128, 2, ValueMode::Fp16);
        assert_eq!(short.compressed_rows(), 0);
        assert_eq!(short.buffered_rows(), 3);
        // nothing compressed: reconstruction returns the inputs verbatim
        let (k_hat, v_hat) = short.reconstruct_cache().unwrap();
        assert_eq!(k_hat.as_slice(), keys.as_slice());
        assert_eq!(v_hat.as_slice(), values.as_slice());
    }

    fn lossless_state(
        l_seq: usize,
        n_b: usize,
        seed: u64,
    ) -> (CompressedKvState, DenseMatrix, DenseMatrix) {
        // square orthonormal dictionaries at s = m encode exactly; small row
        // scale keeps fp16 quantization below the 1e-4 tolerance
        let mut rng = testutil::rng(seed);
        let m = 8;
        let dict_k = testutil::orthonormal_dictionary(&mut rng, m);
        let dict_v = testutil::orthonormal_dictionary(&mut rng, m);
        let keys = testutil::random_matrix(&mut rng, l_seq, m, 0.05);
        let values = testutil::random_matrix(&mut rng, l_seq, m, 0.05);
        let cfg = CacheConfig {
            sparsity: m,
            buffer_len: n_b,
            value_mode: ValueMode::Fp16,
            ..CacheConfig::new(m)
        };
        let state = CompressedKvState::prefill(&keys, &values, dict_k, dict_v, cfg).unwrap();
        (state, keys, values)
    }

    #[test]
    fn lossless_prefill_reconstructs_input() {
        let (state, keys, values) = lossless_state(12, 3, 3);
        let (k_hat, v_hat) = state.reconstruct_cache().unwrap();
        assert_eq!(k_hat.rows(), state.token_count());
        for i in 0..keys.rows() {
            for (a, b) in keys.row(i).iter().zip(k_hat.row(i)) {
                assert!((a - b).abs() <= 1e-4, "K row {i}: {a} vs {b}");
            }
            for (a, b) in values.row(i).iter().zip(v_hat.row(i)) {
                assert!((a - b).abs() <= 1e-4, "V row {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn buffer_only_decode_matches_reference_exactly() {
        let (mut state, keys, values) = small_state(5, 128, 4, ValueMode::Fp16);
        assert_eq!(state.compressed_rows(), 0);
        let mut rng = testutil::rng(40);
        let q = testutil::random_vector(&mut rng, 8, 1.0);
        let k_t = testutil::random_vector(&mut rng, 8, 0.5);
        let v_t = testutil::random_vector(&mut rng, 8, 0.5);
        let out = state.decode_step(&q, &k_t, &v_t).unwrap();

        let mut k_rows: Vec<DenseVector> = (0..keys.rows())
            .map(|i| DenseVector::new(keys.row(i).to_vec()).unwrap())
            .collect();
        k_rows.push(k_t);
        let mut v_rows: Vec<DenseVector> = (0..values.rows())
            .map(|i| DenseVector::new(values.row(i).to_vec()).unwrap())
            .collect();
        v_rows.push(v_t);
        let k_full = DenseMatrix::from_rows(&k_rows).unwrap();
        let v_full = DenseMatrix::from_rows(&v_rows).unwrap();
        let (want, want_scores) = reference_attention_with_scores(&q, &k_full, &v_full).unwrap();
        for (a, b) in out.attention_out.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() <= 1e-5);
        }
        for (a, b) in out.scores.as_slice().iter().zip(want_scores.as_slice()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn lossless_decode_matches_reference_on_original_cache() {
        let (mut state, keys, values) = lossless_state(12, 3, 5);
        let mut rng = testutil::rng(50);
        let q = testutil::random_vector(&mut rng, 8, 1.0);
        let k_t = testutil::random_vector(&mut rng, 8, 0.05);
        let v_t = testutil::random_vector(&mut rng, 8, 0.05);
        let out = state.decode_step(&q, &k_t, &v_t).unwrap();

        let mut k_rows: Vec<DenseVector> = (0..keys.rows())
            .map(|i| DenseVector::new(keys.row(i).to_vec()).unwrap())
            .collect();
        k_rows.push(k_t);
        let mut v_rows: Vec<DenseVector> = (0..values.rows())
            .map(|i| DenseVector::new(values.row(i).to_vec()).unwrap())
            .collect();
        v_rows.push(v_t);
        let want = crate::analysis::reference_attention(
            &q,
            &DenseMatrix::from_rows(&k_rows).unwrap(),
            &DenseMatrix::from_rows(&v_rows).unwrap(),
        )
        .unwrap();
        for (a, b) in out.attention_out.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn scores_sum_to_one_and_cover_all_tokens() {
        let (mut state, _, _) = small_state(10, 4, 6, ValueMode::Fp8E4M3);
        let mut rng = testutil::rng(60);
        let q = testutil::random_vector(&mut rng, 8, 1.0);
        let k_t = testutil::random_vector(&mut rng, 8, 0.5);
        let v_t = testutil::random_vector(&mut rng, 8, 0.5);
        let out = state.decode_step(&q, &k_t, &v_t).unwrap();
        assert_eq!(out.scores.len(), state.token_count());
        let sum: f64 = out.scores.as_slice().iter().map(|v| *v as f64).sum();
        assert!((sum - 1.0).abs() <= 1e-5);
        assert!(out.scores.as_slice().iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn fifo_eviction_keeps_newest_rows() {
        let (mut state, _, _) = small_state(4, 2, 7, ValueMode::Fp16);
        assert_eq!(state.buffered_rows(), 2);
        let compressed_before = state.compressed_rows();
        let mut rng = testutil::rng(70);
        let q = testutil::random_vector(&mut rng, 8, 1.0);
        let k_t = testutil::random_vector(&mut rng, 8, 0.5);
        let v_t = testutil::random_vector(&mut rng, 8, 0.5);
        state.decode_step(&q, &k_t, &v_t).unwrap();
        assert_eq!(state.buffered_rows(), 2);
        assert_eq!(state.compressed_rows(), compressed_before + 1);
        let newest = state.key_buffer_rows().last().unwrap();
        assert_eq!(newest, k_t.as_slice());
        state.check_invariants().unwrap();
    }

    #[test]
    fn split_scores_agrees_with_dense_reconstruction() {
        let (state, _, _) = small_state(14, 4, 8, ValueMode::Fp16);
        let mut rng = testutil::rng(80);
        let q = testutil::random_vector(&mut rng, 8, 1.0);
        let k_t = testutil::random_vector(&mut rng, 8, 0.5);
        let buffer: Vec<DenseVector> = state
            .key_buffer_rows()
            .map(|r| DenseVector::new(r.to_vec()).unwrap())
            .collect();
        let got = split_scores(&q, state.dict_k(), state.k_block(), &buffer, &k_t).unwrap();

        let (k_hat, _) = state.reconstruct_cache().unwrap();
        let scale = 1.0 / (8f64).sqrt();
        for i in 0..k_hat.rows() {
            let want = dot_slices(q.as_slice(), k_hat.row(i)) * scale;
            let g = got.as_slice()[i] as f64;
            let tol = 1e-4 * want.abs().max(1e-3);
            assert!((g - want).abs() <= tol, "row {i}: {g} vs {want}");
        }
        let want_last = dot_slices(q.as_slice(), k_t.as_slice()) * scale;
        assert!((got.as_slice()[k_hat.rows()] as f64 - want_last).abs() <= 1e-5);
    }

    #[test]
    fn split_scores_zero_query_and_single_row_linearity() {
        let mut rng = testutil::rng(90);
        let dict = testutil::random_dictionary(&mut rng, 8, 16);
        let code = SparseCode {
            entries: vec![(3, 2.5)],
            residual_rel: 0.0,
        };
        let block = crate::csr::pack(&[code], ValueMode::Fp16).unwrap();
        let k_t = testutil::random_vector(&mut rng, 8, 1.0);

        let zero = DenseVector::new(vec![0.0; 8]).unwrap();
        let scores = split_scores(&zero, &dict, &block, &[], &k_t).unwrap();
        assert!(scores.as_slice().iter().all(|s| *s == 0.0));

        let q = testutil::random_vector(&mut rng, 8, 1.0);
        let scores = split_scores(&q, &dict, &block, &[], &k_t).unwrap();
        let qd3 = dot_slices(q.as_slice(), dict.atom(3));
        let want = 2.5 * qd3 / (8f64).sqrt();
        assert!((scores.as_slice()[0] as f64 - want).abs() <= 1e-5 * want.abs().max(1.0));
    }

    #[test]
    fn split_scores_rejects_mismatched_block() {
        let mut rng = testutil::rng(91);
        let dict = testutil::random_dictionary(&mut rng, 8, 16);
        let code = SparseCode {
            entries: vec![(16, 1.0)], // one past the dictionary width
            residual_rel: 0.0,
        };
        let block = crate::csr::pack(&[code], ValueMode::Fp16).unwrap();
        let q = testutil::random_vector(&mut rng, 8, 1.0);
        let k_t = testutil::random_vector(&mut rng, 8, 1.0);
        assert!(matches!(
            split_scores(&q, &dict, &block, &[], &k_t),
            Err(Error::IndexOutOfRange {
                index: 16,
                width: 16
            })
        ));
    }

    #[test]
    fn snapshot_rejects_wrong_base_dictionary() {
        // loading against a narrower dictionary than the codes reference
        let (state, _, _) = small_state(10, 2, 12, ValueMode::Fp8E4M3);
        let keyed = vec![KeyedState {
            layer: 0,
            head: 0,
            state,
        }];
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &keyed).unwrap();
        let narrow = crate::dict::init_dictionary(8, 2, 0);
        let result = read_snapshot(&mut buf.as_slice(), |_, role| {
            Ok(narrow.clone().with_role(role, 0))
        });
        assert!(matches!(result, Err(Error::Corrupt(_))), "got {result:?}");
    }

    #[test]
    fn adaptive_insert_contract() {
        let mut rng = testutil::rng(100);
        let m = 8;
        let dict_k = testutil::random_dictionary(&mut rng, m, 16);
        let dict_v = testutil::random_dictionary(&mut rng, m, 16);
        let keys = testutil::random_matrix(&mut rng, 2, m, 1.0);
        let values = testutil::random_matrix(&mut rng, 2, m, 1.0);
        let cfg = CacheConfig {
            sparsity: 2,
            buffer_len: 4,
            rel_error_threshold: Some(0.3),
            adaptive: true,
            max_adaptive_atoms: 4,
            ..CacheConfig::new(2)
        };
        let mut state = CompressedKvState::prefill(&keys, &values, dict_k, dict_v, cfg).unwrap();

        let x = testutil::random_vector(&mut rng, m, 2.0);
        let norm = x.l2_norm();
        let before = state.dict_k().atom_data().to_vec();
        let width_before = state.dict_k().width();

        let code = state.adaptive_insert(&x, DictRole::Key).unwrap();
        assert_eq!(code.entries.len(), 1);
        assert_eq!(code.entries[0].0, width_before);
        assert!((code.entries[0].1 - norm).abs() <= 1e-5 * norm);
        assert_eq!(code.residual_rel, 0.0);
        assert_eq!(state.dict_k().width(), width_before + 1);
        assert_eq!(&state.dict_k().atom_data()[..before.len()], &before[..]);

        // re-encoding x finds the new atom at sparsity 1
        let cfg = OmpConfig {
            max_sparsity: 1,
            rel_error_threshold: Some(0.3),
            batch_rows: 1,
        };
        let re = crate::omp::omp_naive(&x, state.dict_k(), &cfg).unwrap();
        assert_eq!(re.entries.len(), 1);
        assert_eq!(re.entries[0].0, width_before);
        assert!(re.residual_rel <= 1e-5);
    }

    #[test]
    fn adaptive_budget_exhaustion_falls_back() {
        let mut rng = testutil::rng(101);
        let m = 8;
        let dict_k = testutil::random_dictionary(&mut rng, m, 16);
        let dict_v = testutil::random_dictionary(&mut rng, m, 16);
        let keys = testutil::random_matrix(&mut rng, 2, m, 1.0);
        let values = testutil::random_matrix(&mut rng, 2, m, 1.0);
        let cfg = CacheConfig {
            sparsity: 2,
            buffer_len: 4,
            rel_error_threshold: Some(0.05),
            adaptive: true,
            max_adaptive_atoms: 0,
            ..CacheConfig::new(2)
        };
        let mut state = CompressedKvState::prefill(&keys, &values, dict_k, dict_v, cfg).unwrap();
        let width = state.dict_k().width();
        let x = testutil::random_vector(&mut rng, m, 2.0);
        let code = state.adaptive_insert(&x, DictRole::Key).unwrap();
        assert_eq!(state.dict_k().width(), width, "no atom appended");
        assert!(!code.entries.is_empty());
        assert_eq!(state.budget_exhausted_rows(), 1);

        // zero vector: empty code, no atom, no exhaustion count
        let zero = DenseVector::new(vec![0.0; m]).unwrap();
        let code = state.adaptive_insert(&zero, DictRole::Key).unwrap();
        assert!(code.entries.is_empty());
        assert_eq!(state.dict_k().width(), width);
    }

    #[test]
    fn adaptive_decode_grows_dictionary_on_hard_rows() {
        let mut rng = testutil::rng(102);
        let m = 8;
        let dict_k = testutil::random_dictionary(&mut rng, m, 12);
        let dict_v = testutil::random_dictionary(&mut rng, m, 12);
        let keys = testutil::random_matrix(&mut rng, 1, m, 1.0);
        let values = testutil::random_matrix(&mut rng, 1, m, 1.0);
        let cfg = CacheConfig {
            sparsity: 1,
            buffer_len: 1,
            rel_error_threshold: Some(0.01), // random rows will miss this
            adaptive: true,
            max_adaptive_atoms: 64,
            ..CacheConfig::new(1)
        };
        let mut state = CompressedKvState::prefill(&keys, &values, dict_k, dict_v, cfg).unwrap();
        let width_before = state.dict_k().width();
        for _ in 0..3 {
            let q = testutil::random_vector(&mut rng, m, 1.0);
            let k_t = testutil::random_vector(&mut rng, m, 1.0);
            let v_t = testutil::random_vector(&mut rng, m, 1.0);
            state.decode_step(&q, &k_t, &v_t).unwrap();
            state.check_invariants().unwrap();
        }
        assert!(state.dict_k().width() > width_before);
        assert_eq!(
            state.adaptive_atoms(DictRole::Key),
            state.dict_k().width() - width_before
        );
        // evicted hard rows reconstruct exactly through their dedicated atom
        let (k_hat, _) = state.reconstruct_cache().unwrap();
        assert_eq!(k_hat.rows(), state.token_count());
    }

    #[test]
    fn prefill_adaptation_is_gated() {
        let mut rng = testutil::rng(103);
        let m = 8;
        let dict_k = testutil::random_dictionary(&mut rng, m, 12);
        let dict_v = testutil::random_dictionary(&mut rng, m, 12);
        let keys = testutil::random_matrix(&mut rng, 4, m, 1.0);
        let values = testutil::random_matrix(&mut rng, 4, m, 1.0);
        let cfg = CacheConfig {
            sparsity: 1,
            buffer_len: 0,
            rel_error_threshold: Some(0.01),
            adaptive: true,
            max_adaptive_atoms: 64,
            value_mode: ValueMode::Fp16,
            ..CacheConfig::new(1)
        };

        // gate off (default): prefill compresses without touching the dicts
        let state =
            CompressedKvState::prefill(&keys, &values, dict_k.clone(), dict_v.clone(), cfg.clone())
                .unwrap();
        assert_eq!(state.dict_k().width(), 12);
        assert_eq!(state.adaptive_atoms(DictRole::Key), 0);

        // gate on: hard prefill rows grow the dictionaries, and every grown
        // row round-trips exactly through its dedicated atom
        let grown = CompressedKvState::prefill(
            &keys,
            &values,
            dict_k.clone(),
            dict_v,
            CacheConfig {
                adaptive_prefill: true,
                ..cfg
            },
        )
        .unwrap();
        assert!(grown.adaptive_atoms(DictRole::Key) > 0);
        assert_eq!(
            grown.dict_k().width(),
            12 + grown.adaptive_atoms(DictRole::Key)
        );
        assert_eq!(
            &grown.dict_k().atom_data()[..dict_k.atom_data().len()],
            dict_k.atom_data()
        );
        let (k_hat, _) = grown.reconstruct_cache().unwrap();
        for i in 0..keys.rows() {
            let err =
                crate::tensor::l2_distance(keys.row(i), k_hat.row(i)) / l2_norm_slice(keys.row(i));
            // threshold plus the fp16 coefficient quantization of the stored code
            assert!(err <= 0.011, "row {i} error {err} above threshold");
        }
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        assert!(CacheConfig {
            approx_window: 3,
            buffer_len: 2,
            ..CacheConfig::new(4)
        }
        .validate()
        .is_err());
        assert!(CacheConfig {
            adaptive: true,
            ..CacheConfig::new(4)
        }
        .validate()
        .is_err());
        assert!(CacheConfig {
            sparsity: 0,
            ..CacheConfig::new(4)
        }
        .validate()
        .is_err());
        assert!(CacheConfig {
            rel_error_threshold: Some(0.0),
            ..CacheConfig::new(4)
        }
        .validate()
        .is_err());
        // n_b = 0 with n_a = 1 is the bufferless configuration
        CacheConfig {
            buffer_len: 0,
            ..CacheConfig::new(4)
        }
        .validate()
        .unwrap();
    }

    #[test]
    fn bufferless_configuration_works() {
        let (mut state, _, _) = small_state(6, 0, 9, ValueMode::Fp8E4M3);
        assert_eq!(state.compressed_rows(), 6);
        assert_eq!(state.buffered_rows(), 0);
        let mut rng = testutil::rng(110);
        for _ in 0..3 {
            let q = testutil::random_vector(&mut rng, 8, 1.0);
            let k_t = testutil::random_vector(&mut rng, 8, 0.5);
            let v_t = testutil::random_vector(&mut rng, 8, 0.5);
            let out = state.decode_step(&q, &k_t, &v_t).unwrap();
            assert_eq!(out.scores.len(), state.token_count());
            assert_eq!(state.buffered_rows(), 0);
            state.check_invariants().unwrap();
        }
    }

    #[test]
    fn snapshot_round_trip_preserves_state() {
        let (mut state, _, _) = small_state(10, 3, 11, ValueMode::Fp8E4M3);
        let mut rng = testutil::rng(120);
        let q = testutil::random_vector(&mut rng, 8, 1.0);
        let k_t = testutil::random_vector(&mut rng, 8, 0.5);
        let v_t = testutil::random_vector(&mut rng, 8, 0.5);
        state.decode_step(&q, &k_t, &v_t).unwrap();

        let base_k = state.dict_k().clone();
        let base_v = state.dict_v().clone();
        let keyed = vec![KeyedState {
            layer: 2,
            head: 5,
            state: state.clone(),
        }];
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &keyed).unwrap();
        assert_eq!(&buf[..4], b"LXKV");

        let loaded = read_snapshot(&mut buf.as_slice(), |layer, role| {
            assert_eq!(layer, 2);
            Ok(match role {
                DictRole::Key => base_k.clone(),
                DictRole::Value => base_v.clone(),
            })
        })
        .unwrap();
        assert_eq!(loaded.len(), 1);
        let got = &loaded[0];
        assert_eq!((got.layer, got.head), (2, 5));
        assert_eq!(got.state.token_count(), state.token_count());
        assert_eq!(got.state.memory_stats(), state.memory_stats());
        let (k1, v1) = state.reconstruct_cache().unwrap();
        let (k2, v2) = got.state.reconstruct_cache().unwrap();
        assert_eq!(k1.as_slice(), k2.as_slice());
        assert_eq!(v1.as_slice(), v2.as_slice());
    }

    #[test]
    fn snapshot_round_trip_with_adaptive_atoms() {
        let mut rng = testutil::rng(121);
        let m = 8;
        let dict_k = testutil::random_dictionary(&mut rng, m, 12);
        let dict_v = testutil::random_dictionary(&mut rng, m, 12);
        let base_k = dict_k.clone();
        let base_v = dict_v.clone();
        let keys = testutil::random_matrix(&mut rng, 2, m, 1.0);
        let values = testutil::random_matrix(&mut rng, 2, m, 1.0);
        let cfg = CacheConfig {
            sparsity: 1,
            buffer_len: 1,
            rel_error_threshold: Some(0.01),
            adaptive: true,
            max_adaptive_atoms: 8,
            ..CacheConfig::new(1)
        };
        let mut state = CompressedKvState::prefill(&keys, &values, dict_k, dict_v, cfg).unwrap();
        for _ in 0..4 {
            let q = testutil::random_vector(&mut rng, m, 1.0);
            let k_t = testutil::random_vector(&mut rng, m, 1.0);
            let v_t = testutil::random_vector(&mut rng, m, 1.0);
            state.decode_step(&q, &k_t, &v_t).unwrap();
        }
        assert!(state.adaptive_atoms(DictRole::Key) > 0);

        let keyed = vec![KeyedState {
            layer: 0,
            head: 0,
            state: state.clone(),
        }];
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &keyed).unwrap();
        let loaded = read_snapshot(&mut buf.as_slice(), |_, role| {
            Ok(match role {
                DictRole::Key => base_k.clone(),
                DictRole::Value => base_v.clone(),
            })
        })
        .unwrap();
        let got = &loaded[0].state;
        assert_eq!(got.dict_k().width(), state.dict_k().width());
        assert_eq!(got.dict_k().atom_data(), state.dict_k().atom_data());
        let (k1, _) = state.reconstruct_cache().unwrap();
        let (k2, _) = got.reconstruct_cache().unwrap();
        assert_eq!(k1.as_slice(), k2.as_slice());
    }
}
