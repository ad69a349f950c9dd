//! Seeded random-data helpers shared by unit tests, the acceptance suite,
//! and the benchmark harness. Not part of the stable API.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dict::{DictRole, Dictionary};
use crate::tensor::{DenseMatrix, DenseVector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vector(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> DenseVector {
    DenseVector::new((0..len).map(|_| rng.gen_range(-scale..=scale)).collect()).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> DenseMatrix {
    DenseMatrix::new(
        (0..rows * cols)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect(),
        rows,
        cols,
    )
    .unwrap()
}

/// Random dictionary of unit-norm atoms (uniform entries, renormalized).
pub fn random_dictionary(rng: &mut ChaCha8Rng, m: usize, width: usize) -> Dictionary {
    let seed = rng.gen::<u64>();
    crate::dict::init_dictionary(m, width, seed)
}

/// Square dictionary whose atoms form a random orthonormal basis of R^m.
pub fn orthonormal_dictionary(rng: &mut ChaCha8Rng, m: usize) -> Dictionary {
    let basis = crate::analysis::orthonormal_columns(rng, m, m);
    let mut atoms = Vec::with_capacity(m * m);
    for j in 0..m {
        for i in 0..m {
            atoms.push(basis.row(i)[j]);
        }
    }
    Dictionary::from_atom_rows(DenseMatrix::new(atoms, m, m).unwrap(), DictRole::Key, 0).unwrap()
}
