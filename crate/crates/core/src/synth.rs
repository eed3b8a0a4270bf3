//! Seeded synthetic measurement source: D = A·B + σ·noise with a fixed
//! b×R mixing matrix A and fresh Gaussian latent coefficients per slot.
//! Rows of A have unit norm, so every feature carries the same signal power.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Name of the PRNG behind every seeded stream in this crate.
pub const PRNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.9), per-purpose streams";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("rank {rank} must be in 1..min(b, T) = 1..{max}")]
    BadRank { rank: usize, max: usize },
    #[error("noise level must be finite and non-negative")]
    BadNoise,
    #[error("dimension must be positive")]
    ZeroDim,
}

/// Stream ids so independent consumers of one seed never share draws.
pub mod stream {
    pub const BASIS: u64 = 1;
    pub const SLOT: u64 = 1 << 32;
    pub const ADVERSARY: u64 = 2 << 32;
    pub const NETWORK: u64 = 3 << 32;
    pub const SECRETS: u64 = 4 << 32;
    pub const DETECTOR: u64 = 5 << 32;
    pub const BYZANTINE: u64 = 6 << 32;
}

/// Deterministic RNG for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankSource {
    basis: DMatrix<f64>,
    noise: f64,
    seed: u64,
}

impl LowRankSource {
    pub fn new(dim: usize, rank: usize, noise: f64, seed: u64) -> Result<Self, SynthError> {
        if dim == 0 {
            return Err(SynthError::ZeroDim);
        }
        if rank == 0 || rank > dim {
            return Err(SynthError::BadRank { rank, max: dim });
        }
        if !noise.is_finite() || noise < 0.0 {
            return Err(SynthError::BadNoise);
        }
        let mut rng = rng_for(seed, stream::BASIS);
        let mut basis = DMatrix::from_fn(dim, rank, |_, _| StandardNormal.sample(&mut rng));
        for mut row in basis.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        Ok(Self { basis, noise, seed })
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Standard deviation of feature `i` under the generating distribution.
    pub fn feature_scale(&self, i: usize) -> f64 {
        (self.basis.row(i).norm_squared() + self.noise * self.noise).sqrt()
    }

    /// The measurement for `slot`; identical for every call with that slot.
    pub fn sample(&self, slot: u64) -> DVector<f64> {
        let mut rng = rng_for(self.seed, stream::SLOT + slot);
        let coeff = DVector::from_fn(self.rank(), |_, _| StandardNormal.sample(&mut rng));
        let mut d = &self.basis * coeff;
        if self.noise > 0.0 {
            for x in d.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *x += self.noise * e;
            }
        }
        d
    }

    /// Columns for `slots` stacked into a b×T matrix.
    pub fn matrix(&self, slots: std::ops::Range<u64>) -> DMatrix<f64> {
        let cols: Vec<_> = slots.map(|t| self.sample(t)).collect();
        DMatrix::from_columns(&cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_slot() {
        let s = LowRankSource::new(20, 3, 0.01, 9).unwrap();
        assert_eq!(s.sample(5), s.sample(5));
        assert_ne!(s.sample(5), s.sample(6));
        let s2 = LowRankSource::new(20, 3, 0.01, 9).unwrap();
        assert_eq!(s.matrix(0..4), s2.matrix(0..4));
    }

    #[test]
    fn noiseless_matrix_has_planted_rank() {
        let s = LowRankSource::new(12, 4, 0.0, 1).unwrap();
        let m = s.matrix(0..30);
        let sv = m.singular_values();
        let big = sv.iter().filter(|&&x| x > 1e-9 * sv.max()).count();
        assert_eq!(big, 4);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(LowRankSource::new(4, 5, 0.0, 0).is_err());
        assert!(LowRankSource::new(4, 0, 0.0, 0).is_err());
        assert!(LowRankSource::new(4, 2, -1.0, 0).is_err());
    }
}
