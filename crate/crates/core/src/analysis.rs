//! Reference oracles and diagnostics: full-precision attention, exhaustive
//! sparse-approximation search, synthetic mixture-of-subspaces data, and
//! pairwise cosine-similarity maps.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dict::Dictionary;
use crate::error::{Error, Result};
use crate::omp::SparseCode;
use crate::tensor::{dot_slices, l2_norm_slice, DenseMatrix, DenseVector};

/// Full-precision attention for one query: `softmax(q K^T / sqrt(m)) V`,
/// with max-subtracted softmax.
pub fn reference_attention(
    q: &DenseVector,
    k: &DenseMatrix,
    v: &DenseMatrix,
) -> Result<DenseVector> {
    Ok(reference_attention_with_scores(q, k, v)?.0)
}

/// Same as `reference_attention` but also returns the post-softmax weights.
pub fn reference_attention_with_scores(
    q: &DenseVector,
    k: &DenseMatrix,
    v: &DenseMatrix,
) -> Result<(DenseVector, DenseVector)> {
    if k.rows() != v.rows() {
        return Err(Error::Dimension(format!(
            "K rows {} != V rows {}",
            k.rows(),
            v.rows()
        )));
    }
    if q.len() != k.cols() {
        return Err(Error::Dimension(format!(
            "query length {} != K cols {}",
            q.len(),
            k.cols()
        )));
    }
    let scale = 1.0 / (q.len() as f64).sqrt();
    let scores: Vec<f64> = (0..k.rows())
        .map(|i| dot_slices(q.as_slice(), k.row(i)) * scale)
        .collect();
    let weights = softmax_f64(&scores);
    let mut out = vec![0.0f64; v.cols()];
    for (i, w) in weights.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(v.row(i)) {
            *o += w * *x as f64;
        }
    }
    Ok((
        DenseVector::from_computed(out.iter().map(|x| *x as f32).collect()),
        DenseVector::from_computed(weights.iter().map(|x| *x as f32).collect()),
    ))
}

pub(crate) fn softmax_f64(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Globally optimal least-squares code over all supports of size <= s, by
/// exhaustive enumeration. Oracle only; guarded against infeasible sizes.
pub fn brute_force_best_code(k: &DenseVector, dict: &Dictionary, s: usize) -> Result<SparseCode> {
    if k.len() != dict.head_dim() {
        return Err(Error::Dimension(format!(
            "input length {} != head_dim {}",
            k.len(),
            dict.head_dim()
        )));
    }
    let n = dict.width();
    let s = s.min(n);
    let mut total = 0.0f64;
    for t in 1..=s {
        total += binomial(n, t);
    }
    if total > 1e6 {
        return Err(Error::CombinatorialGuard(format!(
            "{total:.0} supports for width {n}, s {s}"
        )));
    }

    let norm_k = l2_norm_slice(k.as_slice());
    if norm_k < crate::omp::ZERO_INPUT_NORM {
        return Ok(SparseCode::empty());
    }

    let mut best_entries: Vec<(usize, f32)> = Vec::new();
    let mut best_residual = norm_k; // empty support
    for t in 1..=s {
        for_each_combination(n, t, &mut |support| {
            let Some(coeffs) = solve_support(dict, k.as_slice(), support) else {
                return;
            };
            let resid = residual_norm(dict, k.as_slice(), support, &coeffs);
            if resid < best_residual {
                best_residual = resid;
                best_entries = support
                    .iter()
                    .zip(&coeffs)
                    .map(|(&a, &c)| (a, c as f32))
                    .collect();
            }
        });
    }
    Ok(SparseCode {
        entries: best_entries,
        residual_rel: (best_residual / norm_k) as f32,
    })
}

fn binomial(n: usize, t: usize) -> f64 {
    let mut acc = 1.0f64;
    for i in 0..t {
        acc *= (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

fn for_each_combination(n: usize, t: usize, f: &mut impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..t).collect();
    loop {
        f(&idx);
        // advance to the next lexicographic combination
        let mut i = t;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - t {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..t {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn solve_support(dict: &Dictionary, k: &[f32], support: &[usize]) -> Option<Vec<f64>> {
    let t = support.len();
    let mut gram = vec![0.0f64; t * t];
    for a in 0..t {
        for b in 0..=a {
            let g = dot_slices(dict.atom(support[a]), dict.atom(support[b]));
            gram[a * t + b] = g;
            gram[b * t + a] = g;
        }
    }
    let rhs: Vec<f64> = support
        .iter()
        .map(|&j| dot_slices(dict.atom(j), k))
        .collect();
    gauss_solve(gram, rhs, t)
}

/// Gaussian elimination with partial pivoting. Deliberately a different
/// algorithm from the solvers inside the pursuit routines, so the oracle has
/// no shared failure mode with what it checks.
fn gauss_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| {
                a[r1 * n + col]
                    .abs()
                    .partial_cmp(&a[r2 * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if a[pivot_row * n + col].abs() < 1e-12 {
            return None;
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(col * n + j, pivot_row * n + j);
            }
            b.swap(col, pivot_row);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut sum = b[row];
        for j in row + 1..n {
            sum -= a[row * n + j] * x[j];
        }
        x[row] = sum / a[row * n + row];
    }
    Some(x)
}

fn residual_norm(dict: &Dictionary, k: &[f32], support: &[usize], coeffs: &[f64]) -> f64 {
    let mut r: Vec<f64> = k.iter().map(|v| *v as f64).collect();
    for (&j, &c) in support.iter().zip(coeffs) {
        for (ri, ai) in r.iter_mut().zip(dict.atom(j)) {
            *ri -= c * *ai as f64;
        }
    }
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Parameters of the synthetic mixture-of-subspaces generator.
#[derive(Debug, Clone, Copy)]
pub struct SubspaceMixtureSpec {
    pub ambient_dim: usize,
    pub n_subspaces: usize,
    pub subspace_dim: usize,
    pub rows_per_subspace: usize,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl SubspaceMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ambient_dim == 0 || self.n_subspaces == 0 || self.rows_per_subspace == 0 {
            return Err(Error::Config(
                "mixture spec dimensions must be positive".into(),
            ));
        }
        if self.subspace_dim == 0 || self.subspace_dim > self.ambient_dim {
            return Err(Error::Config(format!(
                "subspace_dim {} outside 1..={}",
                self.subspace_dim, self.ambient_dim
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// `m x d` matrix with orthonormal columns, drawn from seeded gaussians via
/// Gram-Schmidt.
pub fn orthonormal_columns(rng: &mut ChaCha8Rng, m: usize, d: usize) -> DenseMatrix {
    assert!(d <= m);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..m)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for c in &cols {
            let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= proj * ci;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // degenerate draw, retry
        }
        for vi in &mut v {
            *vi /= norm;
        }
        cols.push(v);
    }
    let mut data = vec![0.0f32; m * d];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            data[i * d + j] = *v as f32;
        }
    }
    DenseMatrix::from_computed(data, m, d)
}

/// Rows drawn from a union of low-dimensional subspaces plus gaussian noise;
/// shuffled, bit-reproducible per seed.
pub fn generate_subspace_mixture(spec: &SubspaceMixtureSpec) -> Result<DenseMatrix> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.ambient_dim;
    let d = spec.subspace_dim;
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(spec.n_subspaces * spec.rows_per_subspace);
    for _ in 0..spec.n_subspaces {
        let basis = orthonormal_columns(&mut rng, m, d);
        for _ in 0..spec.rows_per_subspace {
            let coeffs: Vec<f64> = (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut row = vec![0.0f64; m];
            for i in 0..m {
                let b = basis.row(i);
                for (j, c) in coeffs.iter().enumerate() {
                    row[i] += c * b[j] as f64;
                }
            }
            if spec.noise_sigma > 0.0 {
                for ri in &mut row {
                    *ri += spec.noise_sigma as f64 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            rows.push(row.iter().map(|v| *v as f32).collect());
        }
    }
    rows.shuffle(&mut rng);
    let flat: Vec<f32> = rows.concat();
    DenseMatrix::new(flat, spec.n_subspaces * spec.rows_per_subspace, m)
}

/// Pairwise cosine similarities, optionally reordered by greedy
/// nearest-neighbor chaining to expose block structure.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub values: DenseMatrix,
    /// Row permutation applied for display: `values[i][j]` compares original
    /// rows `ordering[i]` and `ordering[j]`.
    pub ordering: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let n = self.values.rows();
        for i in 0..n {
            let row: Vec<String> = self.values.row(i).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Binary PGM (P5), mapping similarity [-1, 1] to gray [0, 255].
    pub fn write_pgm<W: Write>(&self, w: &mut W) -> Result<()> {
        let n = self.values.rows();
        write!(w, "P5\n{n} {n}\n255\n")?;
        let bytes: Vec<u8> = self
            .values
            .as_slice()
            .iter()
            .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }
}

/// Zero rows take similarity 0 with everything, including themselves.
pub fn cosine_similarity_map(rows: &DenseMatrix, sort_clusters: bool) -> SimilarityMatrix {
    let n = rows.rows();
    let norms: Vec<f64> = (0..n).map(|i| l2_norm_slice(rows.row(i))).collect();
    let mut sim = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = if norms[i] < 1e-12 || norms[j] < 1e-12 {
                0.0
            } else {
                (dot_slices(rows.row(i), rows.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                    as f32
            };
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }

    let ordering: Vec<usize> = if sort_clusters {
        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut current = 0usize;
        visited[0] = true;
        order.push(0);
        while order.len() < n {
            let mut best = usize::MAX;
            let mut best_sim = f32::NEG_INFINITY;
            for cand in 0..n {
                if !visited[cand] && sim[current * n + cand] > best_sim {
                    best_sim = sim[current * n + cand];
                    best = cand;
                }
            }
            visited[best] = true;
            order.push(best);
            current = best;
        }
        order
    } else {
        (0..n).collect()
    };

    let mut values = vec![0.0f32; n * n];
    for (i, &pi) in ordering.iter().enumerate() {
        for (j, &pj) in ordering.iter().enumerate() {
            values[i * n + j] = sim[pi * n + pj];
        }
    }
    SimilarityMatrix {
        values: DenseMatrix::from_computed(values, n, n),
        ordering,
    }
}
