//! Overcomplete dictionaries of unit-norm atoms and their training loop:
//! alternate batched OMP encoding with an Adam step on the reconstruction
//! loss, keeping atoms on the unit sphere by projecting gradients onto the
//! tangent space and renormalizing after each update.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::omp::{omp_batch, OmpConfig, SparseCode};
use crate::tensor::{dot_slices, l2_norm_slice, DenseMatrix, DenseVector};

/// Atom columns may deviate from unit norm by at most this much.
pub const UNIT_NORM_TOL: f32 = 1e-5;

/// Renormalization is skipped when the norm is already this close to 1,
/// so a zero-gradient step leaves the dictionary bit-unchanged.
const RENORM_SKIP_TOL: f64 = 1e-7;

/// Which half of the cache a dictionary encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DictRole {
    Key,
    Value,
}

impl DictRole {
    pub fn code(self) -> u8 {
        match self {
            DictRole::Key => 0,
            DictRole::Value => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DictRole::Key),
            1 => Ok(DictRole::Value),
            other => Err(Error::Corrupt(format!("unknown dictionary role {other}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DictRole::Key => "key",
            DictRole::Value => "value",
        }
    }
}

/// An m x N dictionary, logically one unit-norm atom per column.
///
/// Atoms are stored contiguously (the transpose of the logical matrix):
/// `atoms` has `width` rows of length `head_dim`, row `j` being atom `d_j`.
/// This keeps the correlation product `D^T r` a sequence of sequential dot
/// products and matches the atom-contiguous on-disk layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DenseMatrix,
    role: DictRole,
    layer_id: u16,
}

impl Dictionary {
    /// Build from an atom-per-row matrix, validating unit norms.
    pub fn from_atom_rows(atoms: DenseMatrix, role: DictRole, layer_id: u16) -> Result<Self> {
        for j in 0..atoms.rows() {
            let norm = l2_norm_slice(atoms.row(j));
            if (norm - 1.0).abs() > UNIT_NORM_TOL as f64 {
                return Err(Error::InvalidInput(format!(
                    "atom {j} has norm {norm}, expected 1.0"
                )));
            }
        }
        Ok(Self {
            atoms,
            role,
            layer_id,
        })
    }

    /// Build without the unit-norm check. For oracles that perturb atoms
    /// (finite differences); production dictionaries go through
    /// `from_atom_rows`.
    pub fn from_atom_rows_unchecked(atoms: DenseMatrix, role: DictRole, layer_id: u16) -> Self {
        Self {
            atoms,
            role,
            layer_id,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.atoms.cols()
    }

    pub fn width(&self) -> usize {
        self.atoms.rows()
    }

    pub fn role(&self) -> DictRole {
        self.role
    }

    pub fn layer_id(&self) -> u16 {
        self.layer_id
    }

    pub fn with_role(mut self, role: DictRole, layer_id: u16) -> Self {
        self.role = role;
        self.layer_id = layer_id;
        self
    }

    /// Atom `j` as a slice of length `head_dim`.
    pub fn atom(&self, j: usize) -> &[f32] {
        self.atoms.row(j)
    }

    /// All atom data, atom-contiguous.
    pub fn atom_data(&self) -> &[f32] {
        self.atoms.as_slice()
    }

    /// `D^T v`: correlation of every atom with `v`, f64 accumulation.
    pub fn correlations(&self, v: &[f32]) -> Vec<f32> {
        (0..self.width())
            .map(|j| dot_slices(self.atom(j), v) as f32)
            .collect()
    }

    /// Append a unit-norm atom, growing the width by one. Existing atoms are
    /// untouched. Returns the new atom's index.
    pub fn append_atom(&mut self, atom: &[f32]) -> Result<usize> {
        if atom.len() != self.head_dim() {
            return Err(Error::Dimension(format!(
                "atom length {} != head_dim {}",
                atom.len(),
                self.head_dim()
            )));
        }
        let norm = l2_norm_slice(atom);
        if (norm - 1.0).abs() > UNIT_NORM_TOL as f64 {
            return Err(Error::InvalidInput(format!(
                "appended atom has norm {norm}, expected 1.0"
            )));
        }
        let idx = self.width();
        self.atoms.push_row(atom);
        Ok(idx)
    }

    /// Largest deviation of any atom norm from 1.
    pub fn max_norm_deviation(&self) -> f32 {
        (0..self.width())
            .map(|j| (l2_norm_slice(self.atom(j)) - 1.0).abs())
            .fold(0.0f64, f64::max) as f32
    }

    // ---- on-disk format ---------------------------------------------------
    //
    // magic "LXDC", version u16, role u8, layer_id u16, m u32, N u32, then
    // m*N f32 values in column-major (atom-contiguous) order, little-endian.

    const MAGIC: &'static [u8; 4] = b"LXDC";
    const VERSION: u16 = 1;

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&[self.role.code()])?;
        w.write_all(&self.layer_id.to_le_bytes())?;
        w.write_all(&(self.head_dim() as u32).to_le_bytes())?;
        w.write_all(&(self.width() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.atoms.as_slice().len() * 4);
        for v in self.atoms.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Corrupt("bad dictionary magic".into()));
        }
        let version = read_u16(r)?;
        if version != Self::VERSION {
            return Err(Error::Corrupt(format!(
                "unsupported dictionary version {version}"
            )));
        }
        let role = DictRole::from_code(read_u8(r)?)?;
        let layer_id = read_u16(r)?;
        let m = read_u32(r)? as usize;
        let n = read_u32(r)? as usize;
        if m == 0 || n == 0 {
            return Err(Error::Corrupt("zero dictionary dimension".into()));
        }
        if m.saturating_mul(n) > (1 << 28) {
            return Err(Error::Corrupt(format!(
                "dictionary {m}x{n} beyond size limit"
            )));
        }
        let mut buf = vec![0u8; m * n * 4];
        r.read_exact(&mut buf)?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let atoms = DenseMatrix::new(data, n, m)
            .map_err(|e| Error::Corrupt(format!("dictionary payload: {e}")))?;
        Self::from_atom_rows(atoms, role, layer_id)
            .map_err(|e| Error::Corrupt(format!("dictionary atoms: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
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

/// Fresh dictionary with entries uniform on [-1/sqrt(N), 1/sqrt(N)] and each
/// atom rescaled to unit norm. Deterministic for a fixed seed.
pub fn init_dictionary(m: usize, width: usize, seed: u64) -> Dictionary {
    assert!(m >= 1 && width >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (width as f32).sqrt();
    let mut data = Vec::with_capacity(m * width);
    for _ in 0..width {
        let start = data.len();
        loop {
            data.truncate(start);
            for _ in 0..m {
                data.push(rng.gen_range(-bound..=bound));
            }
            let norm = l2_norm_slice(&data[start..]);
            // astronomically unlikely, but an all-zero draw cannot be normalized
            if norm > 0.0 {
                for v in &mut data[start..] {
                    *v = (*v as f64 / norm) as f32;
                }
                break;
            }
        }
    }
    let atoms = DenseMatrix::new(data, width, m).expect("finite init");
    Dictionary::from_atom_rows(atoms, DictRole::Key, 0).expect("normalized init")
}

/// Remove the component of `grad` parallel to `atom` (which must be unit
/// norm): returns `grad - (grad . atom) atom`.
pub fn project_tangent(atom: &DenseVector, grad: &DenseVector) -> Result<DenseVector> {
    if atom.len() != grad.len() {
        return Err(Error::Dimension(format!(
            "project_tangent: {} vs {}",
            atom.len(),
            grad.len()
        )));
    }
    let parallel = dot_slices(grad.as_slice(), atom.as_slice());
    let out = grad
        .as_slice()
        .iter()
        .zip(atom.as_slice())
        .map(|(g, a)| (*g as f64 - parallel * *a as f64) as f32)
        .collect();
    Ok(DenseVector::from_computed(out))
}

/// Learning-rate schedule over the full training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    CosineDecay,
    Constant,
}

/// Hyperparameters for `train_dictionary`.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub sparsity: usize,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub minibatch_rows: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 20,
            schedule: LrSchedule::CosineDecay,
            sparsity: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            minibatch_rows: 128,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.sparsity == 0 {
            return Err(Error::Config("sparsity must be >= 1".into()));
        }
        if self.minibatch_rows == 0 {
            return Err(Error::Config("minibatch_rows must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam optimizer state over the flattened (atom-contiguous) dictionary.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(cfg: &TrainConfig, param_count: usize) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1 as f64,
            beta2: cfg.adam_beta2 as f64,
            eps: cfg.adam_eps as f64,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// One bias-corrected update; returns the per-parameter deltas.
    fn update(&mut self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.lr as f64;
        grad.iter()
            .enumerate()
            .map(|(i, g)| {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[i] / bc1;
                let vhat = self.v[i] / bc2;
                -lr * mhat / (vhat.sqrt() + self.eps)
            })
            .collect()
    }
}

/// Mean squared reconstruction loss over `batch` with the codes held fixed.
pub fn frozen_code_loss(dict: &Dictionary, batch: &DenseMatrix, codes: &[SparseCode]) -> f64 {
    let mut total = 0.0f64;
    for (i, code) in codes.iter().enumerate() {
        let r = residual_f64(dict, batch.row(i), code);
        total += r.iter().map(|v| v * v).sum::<f64>();
    }
    total / codes.len() as f64
}

/// Gradient of `frozen_code_loss` with respect to the dictionary entries,
/// atom-contiguous layout: for each row, dL/dD = -2 r y^T, averaged over the
/// batch. Only atoms in some support receive gradient.
pub fn frozen_code_gradient(
    dict: &Dictionary,
    batch: &DenseMatrix,
    codes: &[SparseCode],
) -> Vec<f64> {
    let m = dict.head_dim();
    let mut grad = vec![0.0f64; dict.width() * m];
    let scale = 2.0 / codes.len() as f64;
    for (i, code) in codes.iter().enumerate() {
        let r = residual_f64(dict, batch.row(i), code);
        for &(atom, coeff) in &code.entries {
            let g = &mut grad[atom * m..(atom + 1) * m];
            let c = coeff as f64 * scale;
            for (gj, rj) in g.iter_mut().zip(&r) {
                *gj -= c * rj;
            }
        }
    }
    grad
}

fn residual_f64(dict: &Dictionary, row: &[f32], code: &SparseCode) -> Vec<f64> {
    let mut r: Vec<f64> = row.iter().map(|v| *v as f64).collect();
    for &(atom, coeff) in &code.entries {
        let a = dict.atom(atom);
        let c = coeff as f64;
        for (rj, aj) in r.iter_mut().zip(a) {
            *rj -= c * *aj as f64;
        }
    }
    r
}

/// One training step: encode the batch with OMP at sparsity `s`, take an
/// Adam step on the frozen-code gradient (tangent-projected per atom), then
/// renormalize atoms. Returns the pre-update mean loss.
pub fn train_step(
    dict: &mut Dictionary,
    batch: &DenseMatrix,
    sparsity: usize,
    adam: &mut AdamState,
) -> Result<f32> {
    if batch.cols() != dict.head_dim() {
        return Err(Error::Dimension(format!(
            "batch cols {} != head_dim {}",
            batch.cols(),
            dict.head_dim()
        )));
    }
    let cfg = OmpConfig::new(sparsity);
    let codes = omp_batch(batch, dict, &cfg)?;
    let loss = frozen_code_loss(dict, batch, &codes);
    let mut grad = frozen_code_gradient(dict, batch, &codes);

    let m = dict.head_dim();
    for j in 0..dict.width() {
        let atom = dict.atom(j);
        let g = &mut grad[j * m..(j + 1) * m];
        let parallel: f64 = g.iter().zip(atom).map(|(gi, ai)| gi * *ai as f64).sum();
        if parallel != 0.0 {
            for (gi, ai) in g.iter_mut().zip(atom) {
                *gi -= parallel * *ai as f64;
            }
        }
    }

    let deltas = adam.update(&grad);
    for j in 0..dict.width() {
        let row = dict.atoms.row_mut(j);
        let d = &deltas[j * m..(j + 1) * m];
        for (ri, di) in row.iter_mut().zip(d) {
            *ri = (*ri as f64 + di) as f32;
        }
        let norm = l2_norm_slice(row);
        if (norm - 1.0).abs() > RENORM_SKIP_TOL && norm > 0.0 {
            for ri in row.iter_mut() {
                *ri = (*ri as f64 / norm) as f32;
            }
        }
    }
    Ok(loss as f32)
}

/// Per-epoch training record plus summary metrics.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_mean_loss: Vec<f32>,
    pub final_mean_rel_error: f32,
    pub atom_norm_max_deviation: f32,
}

impl TrainReport {
    /// Line-oriented `epoch,mean_loss` text.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "epoch,mean_loss")?;
        for (i, loss) in self.epoch_mean_loss.iter().enumerate() {
            writeln!(w, "{},{}", i, loss)?;
        }
        Ok(())
    }
}

/// Train a dictionary on `samples` (one vector per row). Deterministic for a
/// fixed config seed.
pub fn train_dictionary(
    samples: &DenseMatrix,
    m: usize,
    width: usize,
    cfg: &TrainConfig,
) -> Result<(Dictionary, TrainReport)> {
    cfg.validate()?;
    if samples.cols() != m {
        return Err(Error::Dimension(format!(
            "samples cols {} != m {m}",
            samples.cols()
        )));
    }
    if cfg.sparsity > m.min(width) {
        return Err(Error::Config(format!(
            "sparsity {} exceeds min(head_dim {m}, width {width})",
            cfg.sparsity
        )));
    }

    let mut dict = init_dictionary(m, width, cfg.rng_seed);
    let mut adam = AdamState::new(cfg, width * m);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(1));

    let n_rows = samples.rows();
    let steps_per_epoch = n_rows.div_ceil(cfg.minibatch_rows);
    let total_steps = (cfg.epochs * steps_per_epoch) as f64;
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut epoch_mean_loss = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.minibatch_rows) {
            adam.lr = match cfg.schedule {
                LrSchedule::Constant => cfg.learning_rate,
                LrSchedule::CosineDecay => {
                    let t = global_step as f64 / total_steps;
                    (cfg.learning_rate as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
                        as f32
                }
            };
            let rows: Vec<DenseVector> = chunk
                .iter()
                .map(|&i| DenseVector::from_computed(samples.row(i).to_vec()))
                .collect();
            let batch = DenseMatrix::from_rows(&rows)?;
            let loss = train_step(&mut dict, &batch, cfg.sparsity, &mut adam)?;
            epoch_loss += loss as f64 * chunk.len() as f64;
            global_step += 1;
        }
        epoch_mean_loss.push((epoch_loss / n_rows as f64) as f32);
    }

    let final_mean_rel_error = mean_relative_error(&dict, samples, cfg.sparsity)?;
    let report = TrainReport {
        epoch_mean_loss,
        final_mean_rel_error,
        atom_norm_max_deviation: dict.max_norm_deviation(),
    };
    Ok((dict, report))
}

/// Mean OMP relative reconstruction error of `rows` at sparsity `s`.
pub fn mean_relative_error(dict: &Dictionary, rows: &DenseMatrix, sparsity: usize) -> Result<f32> {
    let cfg = OmpConfig::new(sparsity);
    let codes = omp_batch(rows, dict, &cfg)?;
    let sum: f64 = codes.iter().map(|c| c.residual_rel as f64).sum();
    Ok((sum / codes.len() as f64) as f32)
}
