//! Minimal dense linear-algebra substrate: vectors, matrices, norms,
//! products, argmax. All reductions accumulate in f64 and cast the result
//! back to f32 so that greedy atom selection stays stable across batch
//! sizes and thread counts.

use crate::error::{Error, Result};

/// A dense vector of finite f32 values, length >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    data: Vec<f32>,
}

impl DenseVector {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("vector must be non-empty".into()));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite element {} at position {bad}",
                data[bad]
            )));
        }
        Ok(Self { data })
    }

    /// Construction from values already known to be finite (internal
    /// arithmetic results). Debug builds still verify.
    pub(crate) fn from_computed(data: Vec<f32>) -> Self {
        debug_assert!(!data.is_empty() && data.iter().all(|v| v.is_finite()));
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len >= 1, "zero-length vector");
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // len >= 1 by construction
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Dot product, f64 accumulation.
    pub fn dot(&self, other: &DenseVector) -> Result<f32> {
        if self.len() != other.len() {
            return Err(Error::Dimension(format!(
                "dot: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(dot_slices(&self.data, &other.data) as f32)
    }

    /// Euclidean norm; returns 0 iff the vector is exactly zero.
    pub fn l2_norm(&self) -> f32 {
        l2_norm_slice(&self.data) as f32
    }

    /// Smallest index attaining the maximum absolute value.
    pub fn argmax_abs(&self) -> usize {
        argmax_abs_slice(&self.data)
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f32;
    fn index(&self, i: usize) -> &f32 {
        &self.data[i]
    }
}

/// A dense row-major matrix of finite f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    data: Vec<f32>,
    rows: usize,
    cols: usize,
}

impl DenseMatrix {
    pub fn new(data: Vec<f32>, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(
                "matrix dimensions must be positive".into(),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite element {} at position {bad}",
                data[bad]
            )));
        }
        Ok(Self { data, rows, cols })
    }

    pub(crate) fn from_computed(data: Vec<f32>, rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data, rows, cols }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1);
        Self {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_rows(rows: &[DenseVector]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidInput("matrix needs at least one row".into()))?;
        let cols = first.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row length {} != {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r.as_slice());
        }
        Ok(Self {
            data,
            rows: rows.len(),
            cols,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn push_row(&mut self, row: &[f32]) {
        debug_assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Copy of the row range `[start, end)` as a new matrix.
    pub fn row_range(&self, start: usize, end: usize) -> Result<DenseMatrix> {
        if start >= end || end > self.rows {
            return Err(Error::Dimension(format!(
                "row range {start}..{end} out of bounds for {} rows",
                self.rows
            )));
        }
        Ok(Self {
            data: self.data[start * self.cols..end * self.cols].to_vec(),
            rows: end - start,
            cols: self.cols,
        })
    }

    /// Explicit transpose (copies).
    pub fn transposed(&self) -> DenseMatrix {
        let mut data = vec![0.0f32; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            data,
            rows: self.cols,
            cols: self.rows,
        }
    }

    /// Matrix-vector product `M x` (or `M^T x` with `transpose`),
    /// f64 partial sums.
    pub fn mat_vec(&self, x: &DenseVector, transpose: bool) -> Result<DenseVector> {
        if transpose {
            if self.rows != x.len() {
                return Err(Error::Dimension(format!(
                    "mat_vec^T: {} rows vs vector length {}",
                    self.rows,
                    x.len()
                )));
            }
            let mut out = vec![0.0f64; self.cols];
            for (i, xi) in x.as_slice().iter().enumerate() {
                let xi = *xi as f64;
                let row = self.row(i);
                for (o, m) in out.iter_mut().zip(row) {
                    *o += xi * (*m as f64);
                }
            }
            Ok(DenseVector::from_computed(
                out.iter().map(|v| *v as f32).collect(),
            ))
        } else {
            if self.cols != x.len() {
                return Err(Error::Dimension(format!(
                    "mat_vec: {} cols vs vector length {}",
                    self.cols,
                    x.len()
                )));
            }
            let out = (0..self.rows)
                .map(|i| dot_slices(self.row(i), x.as_slice()) as f32)
                .collect();
            Ok(DenseVector::from_computed(out))
        }
    }
}

pub(crate) fn dot_slices(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Euclidean distance between two equal-length slices, f64 accumulation.
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn l2_norm_slice(x: &[f32]) -> f64 {
    x.iter()
        .map(|v| (*v as f64) * (*v as f64))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn argmax_abs_slice(x: &[f32]) -> usize {
    let mut best = 0usize;
    let mut best_val = x[0].abs();
    for (i, v) in x.iter().enumerate().skip(1) {
        let a = v.abs();
        if a > best_val {
            best = i;
            best_val = a;
        }
    }
    best
}
