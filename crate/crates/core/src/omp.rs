//! Orthogonal Matching Pursuit against a dictionary of unit-norm atoms.
//!
//! Two routes produce the same codes:
//!
//! * `omp_naive` re-solves the restricted least-squares problem from scratch
//!   each iteration (normal equations, fresh Cholesky factorization);
//! * `omp_batch` maintains an incremental Cholesky factor of the Gram matrix
//!   of the selected atoms, so an iteration costs O(Nm + s^2) instead of a
//!   dense re-solve, and processes rows in parallel.
//!
//! Their agreement (identical supports, coefficients within 1e-5) is part of
//! the test suite. Selection ties break toward the lowest atom index, which
//! makes both routes deterministic.

use rayon::prelude::*;

use crate::dict::Dictionary;
use crate::error::{Error, Result};
use crate::tensor::{argmax_abs_slice, dot_slices, l2_norm_slice, DenseMatrix, DenseVector};

/// Inputs with norm below this are treated as zero and encode to the empty
/// code with residual 0.
pub const ZERO_INPUT_NORM: f64 = 1e-12;

/// A Cholesky pivot below this marks the selected atoms as numerically
/// rank-deficient; the solver stops and returns the code built so far.
pub const CHOLESKY_PIVOT_MIN: f64 = 1e-10;

/// Relative residuals at or below this are "exactly zero" for stopping
/// purposes: f32 inputs constructed inside a span carry rounding of this
/// order, so greedy selection past it only chases noise.
const RESIDUAL_REL_FLOOR: f64 = 1e-6;

/// Sparse approximation of one vector: `(atom index, coefficient)` pairs in
/// selection order, plus the achieved relative residual.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    /// Entries in the order atoms were selected.
    pub entries: Vec<(usize, f32)>,
    /// Achieved `||k - Dy|| / ||k||`; 0 for zero input.
    pub residual_rel: f32,
}

impl SparseCode {
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
            residual_rel: 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Atom indices in selection order.
    pub fn support(&self) -> Vec<usize> {
        self.entries.iter().map(|&(a, _)| a).collect()
    }
}

/// Solver limits: target sparsity, optional early-termination threshold, and
/// the row granularity of the batched solver.
#[derive(Debug, Clone)]
pub struct OmpConfig {
    pub max_sparsity: usize,
    pub rel_error_threshold: Option<f32>,
    pub batch_rows: usize,
}

impl OmpConfig {
    pub fn new(max_sparsity: usize) -> Self {
        Self {
            max_sparsity,
            rel_error_threshold: None,
            batch_rows: 64,
        }
    }

    pub fn with_threshold(mut self, delta: f32) -> Self {
        self.rel_error_threshold = Some(delta);
        self
    }

    pub fn validate(&self, dict: &Dictionary) -> Result<()> {
        if self.max_sparsity == 0 {
            return Err(Error::Config("max_sparsity must be >= 1".into()));
        }
        // beyond head_dim atoms the restricted system is underdetermined
        if self.max_sparsity > dict.head_dim() || self.max_sparsity > dict.width() {
            return Err(Error::Config(format!(
                "max_sparsity {} exceeds min(head_dim {}, width {})",
                self.max_sparsity,
                dict.head_dim(),
                dict.width()
            )));
        }
        if let Some(d) = self.rel_error_threshold {
            if d.is_nan() || d <= 0.0 || d > 1.0 {
                return Err(Error::Config(format!(
                    "rel_error_threshold {d} outside (0, 1]"
                )));
            }
        }
        if self.batch_rows == 0 {
            return Err(Error::Config("batch_rows must be >= 1".into()));
        }
        Ok(())
    }
}

/// Greedy OMP with per-iteration re-solve of the restricted least squares.
pub fn omp_naive(k: &DenseVector, dict: &Dictionary, cfg: &OmpConfig) -> Result<SparseCode> {
    cfg.validate(dict)?;
    if k.len() != dict.head_dim() {
        return Err(Error::Dimension(format!(
            "input length {} != head_dim {}",
            k.len(),
            dict.head_dim()
        )));
    }
    Ok(omp_naive_row(k.as_slice(), dict, cfg))
}

/// Batched OMP over matrix rows via incremental Cholesky updates. Row
/// results are independent of each other and of the parallel schedule, and
/// match `omp_naive` per row.
pub fn omp_batch(
    rows: &DenseMatrix,
    dict: &Dictionary,
    cfg: &OmpConfig,
) -> Result<Vec<SparseCode>> {
    cfg.validate(dict)?;
    if rows.cols() != dict.head_dim() {
        return Err(Error::Dimension(format!(
            "row length {} != head_dim {}",
            rows.cols(),
            dict.head_dim()
        )));
    }
    Ok((0..rows.rows())
        .into_par_iter()
        .with_min_len(cfg.batch_rows)
        .map(|i| omp_cholesky_row(rows.row(i), dict, cfg))
        .collect())
}

/// `D y` for a sparse code: sum of scaled atoms, zero vector for the empty
/// code.
pub fn reconstruct(code: &SparseCode, dict: &Dictionary) -> Result<DenseVector> {
    let m = dict.head_dim();
    let mut out = vec![0.0f64; m];
    for &(atom, coeff) in &code.entries {
        if atom >= dict.width() {
            return Err(Error::IndexOutOfRange {
                index: atom,
                width: dict.width(),
            });
        }
        let a = dict.atom(atom);
        let c = coeff as f64;
        for (o, ai) in out.iter_mut().zip(a) {
            *o += c * *ai as f64;
        }
    }
    Ok(DenseVector::from_computed(
        out.iter().map(|v| *v as f32).collect(),
    ))
}

/// `||k - Dy|| / ||k||`; 0 by convention for (near-)zero input.
pub fn relative_error(k: &DenseVector, code: &SparseCode, dict: &Dictionary) -> Result<f32> {
    let norm_k = l2_norm_slice(k.as_slice());
    if norm_k < ZERO_INPUT_NORM {
        return Ok(0.0);
    }
    let rec = reconstruct(code, dict)?;
    if rec.len() != k.len() {
        return Err(Error::Dimension(format!(
            "reconstruction length {} != input length {}",
            rec.len(),
            k.len()
        )));
    }
    let dist: f64 = k
        .as_slice()
        .iter()
        .zip(rec.as_slice())
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt();
    Ok((dist / norm_k) as f32)
}

// ---- naive route -----------------------------------------------------------

fn omp_naive_row(k: &[f32], dict: &Dictionary, cfg: &OmpConfig) -> SparseCode {
    let norm_k = l2_norm_slice(k);
    if norm_k < ZERO_INPUT_NORM {
        return SparseCode::empty();
    }
    let threshold = cfg.rel_error_threshold.map(|d| d as f64);
    let mut support: Vec<usize> = Vec::new();
    let mut coeffs: Vec<f64> = Vec::new();
    let mut residual: Vec<f32> = k.to_vec();
    let mut rel = 1.0f64;

    loop {
        if threshold.is_some_and(|d| rel <= d) {
            break;
        }
        if support.len() == cfg.max_sparsity || rel <= RESIDUAL_REL_FLOOR {
            break;
        }
        let corr = dict.correlations(&residual);
        let n = argmax_abs_slice(&corr);
        if corr[n] == 0.0 {
            break;
        }

        // re-solve least squares on the extended support from scratch
        let mut trial = support.clone();
        trial.push(n);
        let i = trial.len();
        let mut gram = vec![0.0f64; i * i];
        for a in 0..i {
            for b in 0..=a {
                let g = dot_slices(dict.atom(trial[a]), dict.atom(trial[b]));
                gram[a * i + b] = g;
                gram[b * i + a] = g;
            }
        }
        let rhs: Vec<f64> = trial.iter().map(|&j| dot_slices(dict.atom(j), k)).collect();
        let Some(solution) = cholesky_solve(&gram, &rhs, i) else {
            break; // rank-deficient support: keep the code built so far
        };
        support = trial;
        coeffs = solution;
        (residual, rel) = restricted_residual(dict, k, &support, &coeffs, norm_k);
    }

    finish_code(support, coeffs, rel)
}

/// Dense Cholesky factor-and-solve of `G x = b`, `None` on a small pivot.
fn cholesky_solve(gram: &[f64], rhs: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut lower = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = gram[i * n + j];
            for t in 0..j {
                sum -= lower[i * n + t] * lower[j * n + t];
            }
            if i == j {
                if sum < CHOLESKY_PIVOT_MIN {
                    return None;
                }
                lower[i * n + i] = sum.sqrt();
            } else {
                lower[i * n + j] = sum / lower[j * n + j];
            }
        }
    }
    Some(substitute(&RowView::Dense(&lower, n), rhs, n))
}

// ---- Cholesky-update route --------------------------------------------------

/// Incrementally maintained lower-triangular factor, one packed row per
/// selected atom.
struct IncrementalCholesky {
    rows: Vec<Vec<f64>>,
}

impl IncrementalCholesky {
    fn new() -> Self {
        Self { rows: Vec::new() }
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    /// Try to extend the factor with a new atom whose Gram column against
    /// the current support is `gram_col` and squared norm is `gamma`.
    /// Returns false (leaving the factor unchanged) when the pivot falls
    /// under `CHOLESKY_PIVOT_MIN`.
    fn try_push(&mut self, gram_col: &[f64], gamma: f64) -> bool {
        let i = self.rows.len();
        debug_assert_eq!(gram_col.len(), i);
        let mut w = Vec::with_capacity(i + 1);
        for j in 0..i {
            let mut sum = gram_col[j];
            for t in 0..j {
                sum -= w[t] * self.rows[j][t];
            }
            w.push(sum / self.rows[j][j]);
        }
        let mut pivot = gamma;
        for t in 0..i {
            pivot -= w[t] * w[t];
        }
        if pivot < CHOLESKY_PIVOT_MIN {
            return false;
        }
        w.push(pivot.sqrt());
        self.rows.push(w);
        true
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        substitute(&RowView::Packed(&self.rows), rhs, self.rows.len())
    }
}

pub(crate) fn omp_cholesky_row(k: &[f32], dict: &Dictionary, cfg: &OmpConfig) -> SparseCode {
    let norm_k = l2_norm_slice(k);
    if norm_k < ZERO_INPUT_NORM {
        return SparseCode::empty();
    }
    let threshold = cfg.rel_error_threshold.map(|d| d as f64);
    let mut support: Vec<usize> = Vec::new();
    let mut coeffs: Vec<f64> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut factor = IncrementalCholesky::new();
    let mut residual: Vec<f32> = k.to_vec();
    let mut rel = 1.0f64;

    loop {
        if threshold.is_some_and(|d| rel <= d) {
            break;
        }
        if factor.len() == cfg.max_sparsity || rel <= RESIDUAL_REL_FLOOR {
            break;
        }
        let corr = dict.correlations(&residual);
        let n = argmax_abs_slice(&corr);
        if corr[n] == 0.0 {
            break;
        }

        let gram_col: Vec<f64> = support
            .iter()
            .map(|&j| dot_slices(dict.atom(n), dict.atom(j)))
            .collect();
        let gamma = dot_slices(dict.atom(n), dict.atom(n));
        if !factor.try_push(&gram_col, gamma) {
            break;
        }
        support.push(n);
        rhs.push(dot_slices(dict.atom(n), k));
        coeffs = factor.solve(&rhs);
        (residual, rel) = restricted_residual(dict, k, &support, &coeffs, norm_k);
    }

    finish_code(support, coeffs, rel)
}

// ---- shared pieces ----------------------------------------------------------

enum RowView<'a> {
    Dense(&'a [f64], usize),
    Packed(&'a [Vec<f64>]),
}

impl RowView<'_> {
    fn at(&self, i: usize, j: usize) -> f64 {
        match self {
            RowView::Dense(data, n) => data[i * n + j],
            RowView::Packed(rows) => rows[i][j],
        }
    }
}

/// Forward then backward substitution with a lower-triangular factor.
fn substitute(lower: &RowView, rhs: &[f64], n: usize) -> Vec<f64> {
    let mut z = vec![0.0f64; n];
    for i in 0..n {
        let mut sum = rhs[i];
        for t in 0..i {
            sum -= lower.at(i, t) * z[t];
        }
        z[i] = sum / lower.at(i, i);
    }
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut sum = z[i];
        for t in i + 1..n {
            sum -= lower.at(t, i) * x[t];
        }
        x[i] = sum / lower.at(i, i);
    }
    x
}

fn restricted_residual(
    dict: &Dictionary,
    k: &[f32],
    support: &[usize],
    coeffs: &[f64],
    norm_k: f64,
) -> (Vec<f32>, f64) {
    let mut r: Vec<f64> = k.iter().map(|v| *v as f64).collect();
    for (&j, &c) in support.iter().zip(coeffs) {
        for (ri, ai) in r.iter_mut().zip(dict.atom(j)) {
            *ri -= c * *ai as f64;
        }
    }
    let norm_r = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    (r.iter().map(|v| *v as f32).collect(), norm_r / norm_k)
}

fn finish_code(support: Vec<usize>, coeffs: Vec<f64>, rel: f64) -> SparseCode {
    if support.is_empty() {
        // no atom selected: the residual is the whole input
        return SparseCode {
            entries: Vec::new(),
            residual_rel: 1.0,
        };
    }
    SparseCode {
        entries: support
            .into_iter()
            .zip(coeffs)
            .map(|(a, c)| (a, c as f32))
            .collect(),
        residual_rel: if rel <= RESIDUAL_REL_FLOOR {
            rel.max(0.0) as f32
        } else {
            rel as f32
        },
    }
}
