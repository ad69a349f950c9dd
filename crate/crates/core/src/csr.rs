//! Byte-exact CSR packing of sparse codes: one row per token vector,
//! 16-bit atom indices, 16-bit per-row lengths, and coefficients in FP8
//! (E4M3) or FP16. A row of sparsity `s` costs exactly `3s + 2` bytes in
//! FP8 mode and `4s + 2` in FP16 mode.
//!
//! Per-row lengths are stored instead of absolute offsets: they carry the
//! same 2-byte cost per row but cannot overflow once the total entry count
//! passes 65535. Within a row, entries are stored sorted by atom index;
//! selection order is an in-memory property of `SparseCode` only.

use std::io::{Read, Write};

use half::f16;

use crate::error::{Error, Result};
use crate::fp8::{decode_fp8, encode_fp8};
use crate::omp::SparseCode;

/// Coefficient payload width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueMode {
    Fp8E4M3,
    Fp16,
}

impl ValueMode {
    pub fn bytes_per_value(self) -> usize {
        match self {
            ValueMode::Fp8E4M3 => 1,
            ValueMode::Fp16 => 2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ValueMode::Fp8E4M3 => 0,
            ValueMode::Fp16 => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ValueMode::Fp8E4M3),
            1 => Ok(ValueMode::Fp16),
            other => Err(Error::Corrupt(format!("unknown value mode {other}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ValueMode::Fp8E4M3 => "fp8_e4m3",
            ValueMode::Fp16 => "fp16",
        }
    }

    fn quantize(self, x: f32) -> Result<Vec<u8>> {
        match self {
            ValueMode::Fp8E4M3 => Ok(vec![encode_fp8(x)?]),
            ValueMode::Fp16 => {
                if !x.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "fp16 encode of non-finite {x}"
                    )));
                }
                // saturate instead of overflowing to infinity
                let clamped = x.clamp(-f16::MAX.to_f32(), f16::MAX.to_f32());
                Ok(f16::from_f32(clamped).to_le_bytes().to_vec())
            }
        }
    }

    fn dequantize(self, raw: &[u8]) -> Result<f32> {
        match self {
            ValueMode::Fp8E4M3 => decode_fp8(raw[0]),
            ValueMode::Fp16 => {
                let v = f16::from_le_bytes([raw[0], raw[1]]).to_f32();
                if !v.is_finite() {
                    return Err(Error::InvalidEncoding(format!(
                        "non-finite fp16 payload {raw:02x?}"
                    )));
                }
                Ok(v)
            }
        }
    }
}

/// Packed rows of sparse codes.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrBlock {
    row_lengths: Vec<u16>,
    indices: Vec<u16>,
    values: Vec<u8>,
    value_mode: ValueMode,
}

impl CsrBlock {
    pub fn empty(value_mode: ValueMode) -> Self {
        Self {
            row_lengths: Vec::new(),
            indices: Vec::new(),
            values: Vec::new(),
            value_mode,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.row_lengths.len()
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn value_mode(&self) -> ValueMode {
        self.value_mode
    }

    pub fn row_lengths(&self) -> &[u16] {
        &self.row_lengths
    }

    /// Accounting size of the packed payload: per row, 2 bytes of length
    /// plus (2 + value width) bytes per entry. In FP8 mode this is exactly
    /// the sum of `3 s_row + 2` over rows.
    pub fn packed_byte_size(&self) -> usize {
        2 * self.row_lengths.len() + (2 + self.value_mode.bytes_per_value()) * self.indices.len()
    }

    /// Append `codes` as new rows after the existing ones.
    pub fn append_codes(&mut self, codes: &[SparseCode]) -> Result<()> {
        for code in codes {
            let mut entries: Vec<(usize, f32)> = code.entries.clone();
            entries.sort_by_key(|e| e.0);
            for pair in entries.windows(2) {
                if pair[0].0 == pair[1].0 {
                    return Err(Error::InvalidInput(format!(
                        "duplicate atom index {} within a row",
                        pair[0].0
                    )));
                }
            }
            if entries.len() > u16::MAX as usize {
                return Err(Error::IndexOverflow(entries.len()));
            }
            for &(atom, coeff) in &entries {
                if atom > u16::MAX as usize {
                    return Err(Error::IndexOverflow(atom));
                }
                self.indices.push(atom as u16);
                self.values
                    .extend_from_slice(&self.value_mode.quantize(coeff)?);
            }
            self.row_lengths.push(entries.len() as u16);
        }
        Ok(())
    }

    /// Iterate rows as (indices, raw value bytes) slices.
    pub fn rows(&self) -> CsrRowIter<'_> {
        CsrRowIter {
            block: self,
            row: 0,
            offset: 0,
        }
    }

    /// Visit every entry as `(row, atom, coefficient)` with the decode
    /// dispatch hoisted out of the loop. This is the attention hot path:
    /// per-entry cost is one table lookup (FP8) or one f16 conversion.
    pub fn for_each_entry(&self, mut f: impl FnMut(usize, usize, f32)) {
        let mut offset = 0usize;
        match self.value_mode {
            ValueMode::Fp8E4M3 => {
                let table = crate::fp8::decode_table();
                for (row, len) in self.row_lengths.iter().enumerate() {
                    for e in offset..offset + *len as usize {
                        f(
                            row,
                            self.indices[e] as usize,
                            table[self.values[e] as usize],
                        );
                    }
                    offset += *len as usize;
                }
            }
            ValueMode::Fp16 => {
                for (row, len) in self.row_lengths.iter().enumerate() {
                    for e in offset..offset + *len as usize {
                        let v = f16::from_le_bytes([self.values[2 * e], self.values[2 * e + 1]]);
                        f(row, self.indices[e] as usize, v.to_f32());
                    }
                    offset += *len as usize;
                }
            }
        }
    }

    // ---- on-disk format: magic "LXCB", version u16, value_mode u8,
    // n_rows u32, row_lengths u16 x n_rows, indices u16 x nnz, values,
    // all little-endian -----------------------------------------------------

    const MAGIC: &'static [u8; 4] = b"LXCB";
    const VERSION: u16 = 1;

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&[self.value_mode.code()])?;
        w.write_all(&(self.row_lengths.len() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(2 * self.row_lengths.len() + 2 * self.indices.len());
        for l in &self.row_lengths {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        for i in &self.indices {
            buf.extend_from_slice(&i.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.write_all(&self.values)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Corrupt("bad block magic".into()));
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v)?;
        if u16::from_le_bytes(v) != Self::VERSION {
            return Err(Error::Corrupt("unsupported block version".into()));
        }
        let mut mode = [0u8; 1];
        r.read_exact(&mut mode)?;
        let value_mode = ValueMode::from_code(mode[0])?;
        let mut n = [0u8; 4];
        r.read_exact(&mut n)?;
        let n_rows = u32::from_le_bytes(n) as usize;

        let mut buf = vec![0u8; 2 * n_rows];
        r.read_exact(&mut buf)?;
        let row_lengths: Vec<u16> = buf
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let nnz: usize = row_lengths.iter().map(|l| *l as usize).sum();

        let mut buf = vec![0u8; 2 * nnz];
        r.read_exact(&mut buf)?;
        let indices: Vec<u16> = buf
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();

        let mut values = vec![0u8; value_mode.bytes_per_value() * nnz];
        r.read_exact(&mut values)?;

        let block = Self {
            row_lengths,
            indices,
            values,
            value_mode,
        };
        block.validate()?;
        Ok(block)
    }

    fn validate(&self) -> Result<()> {
        let nnz: usize = self.row_lengths.iter().map(|l| *l as usize).sum();
        if nnz != self.indices.len() {
            return Err(Error::Corrupt(format!(
                "row lengths sum {nnz} != index count {}",
                self.indices.len()
            )));
        }
        if self.values.len() != nnz * self.value_mode.bytes_per_value() {
            return Err(Error::Corrupt(format!(
                "value payload {} bytes != {nnz} entries",
                self.values.len()
            )));
        }
        let mut offset = 0usize;
        for (row, len) in self.row_lengths.iter().enumerate() {
            let len = *len as usize;
            let idx = &self.indices[offset..offset + len];
            for pair in idx.windows(2) {
                if pair[1] <= pair[0] {
                    return Err(Error::Corrupt(format!(
                        "row {row} indices not strictly ascending"
                    )));
                }
            }
            for e in 0..len {
                let raw = &self.values[(offset + e) * self.value_mode.bytes_per_value()..]
                    [..self.value_mode.bytes_per_value()];
                self.value_mode
                    .dequantize(raw)
                    .map_err(|err| Error::Corrupt(format!("row {row} entry {e}: {err}")))?;
            }
            offset += len;
        }
        Ok(())
    }
}

pub struct CsrRowIter<'a> {
    block: &'a CsrBlock,
    row: usize,
    offset: usize,
}

pub struct CsrRow<'a> {
    pub indices: &'a [u16],
    raw_values: &'a [u8],
    mode: ValueMode,
}

impl CsrRow<'_> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Decoded (atom, coefficient) pairs. Payload validity is a block
    /// invariant, so decoding cannot fail here.
    pub fn entries(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        let vb = self.mode.bytes_per_value();
        self.indices.iter().enumerate().map(move |(e, idx)| {
            let raw = &self.raw_values[e * vb..(e + 1) * vb];
            (
                *idx as usize,
                self.mode.dequantize(raw).expect("validated payload"),
            )
        })
    }
}

impl<'a> Iterator for CsrRowIter<'a> {
    type Item = CsrRow<'a>;

    fn next(&mut self) -> Option<CsrRow<'a>> {
        if self.row == self.block.row_lengths.len() {
            return None;
        }
        let len = self.block.row_lengths[self.row] as usize;
        let vb = self.block.value_mode.bytes_per_value();
        let row = CsrRow {
            indices: &self.block.indices[self.offset..self.offset + len],
            raw_values: &self.block.values[self.offset * vb..(self.offset + len) * vb],
            mode: self.block.value_mode,
        };
        self.row += 1;
        self.offset += len;
        Some(row)
    }
}

/// Pack codes into a block, canonicalizing each row to ascending atom index
/// and quantizing coefficients.
pub fn pack(codes: &[SparseCode], mode: ValueMode) -> Result<CsrBlock> {
    let mut block = CsrBlock::empty(mode);
    block.append_codes(codes)?;
    Ok(block)
}

/// Rebuild codes from a block. Coefficients carry the quantization already
/// applied at pack time and entries come back in ascending index order;
/// `residual_rel` is not stored on disk and reads back as 0.
pub fn unpack(block: &CsrBlock) -> Result<Vec<SparseCode>> {
    block.validate()?;
    Ok(block
        .rows()
        .map(|row| SparseCode {
            entries: row.entries().collect(),
            residual_rel: 0.0,
        })
        .collect())
}

/// Cache memory accounting against a full-precision FP16 baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryStats {
    pub compressed_bytes: usize,
    pub buffer_bytes: usize,
    pub full_cache_bytes: usize,
    pub kv_size_percent: f64,
}

/// `total_rows` counts every cached token (compressed + buffered); the
/// baseline charges K and V at 2 bytes per element, and so does the buffer.
pub fn memory_stats(
    block_k: &CsrBlock,
    block_v: &CsrBlock,
    buffer_rows: usize,
    total_rows: usize,
    m: usize,
) -> MemoryStats {
    debug_assert!(total_rows >= buffer_rows + block_k.n_rows().max(block_v.n_rows()));
    let compressed_bytes = block_k.packed_byte_size() + block_v.packed_byte_size();
    let buffer_bytes = buffer_rows * 2 * m * 2;
    let full_cache_bytes = total_rows * 2 * m * 2;
    let kv_size_percent = if full_cache_bytes == 0 {
        0.0
    } else {
        100.0 * (compressed_bytes + buffer_bytes) as f64 / full_cache_bytes as f64
    };
    MemoryStats {
        compressed_bytes,
        buffer_bytes,
        full_cache_bytes,
        kv_size_percent,
    }
}
