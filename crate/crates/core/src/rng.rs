//! Seeded random generation. The stream is a fixed counter-based cipher, so a
//! seed reproduces the same values bit-exactly on every platform and run.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Deterministic random source keyed by a 64-bit seed.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform draw from `[-bound, bound]`.
    pub fn uniform(&mut self, bound: f64) -> f64 {
        bound * (2.0 * self.inner.gen::<f64>() - 1.0)
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }
}

/// Matrix with i.i.d. entries uniform in `[-bound, bound]`.
pub fn random_matrix(
    rng: &mut SeededRng,
    rows: usize,
    cols: usize,
    bound: f64,
) -> Result<DenseMatrix> {
    if !(bound > 0.0) {
        return Err(Error::InvalidParameter {
            what: format!("random_matrix bound must be positive, got {bound}"),
        });
    }
    let mut m = DenseMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m.set(i, j, rng.uniform(bound));
        }
    }
    Ok(m)
}
