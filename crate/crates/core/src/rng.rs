//! Reproducible random streams and Gaussian sampling.
//!
//! Every stream is a ChaCha8 generator keyed by the run seed with the stream
//! id selecting one of 2⁶⁴ independent counter-based streams, so a chain's
//! sequence never depends on how many other chains exist or which worker
//! runs it. Standard normals come from `rand_distr`'s ziggurat sampler.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Result};
use crate::linalg::{cholesky, CholeskyFactor, SpdMatrix};

/// Stream ids at or above this value are reserved for experiment stages
/// (data generation, EM restarts, serial chains); chain `i` uses id `i`.
pub const RESERVED_STREAM_BASE: u64 = 1 << 48;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream with the same seed and a different id.
    pub fn sibling(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn sample_standard_normal(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.standard_normal()).collect()
}

/// `μ + L z` with `z` standard normal, given a precomputed factor of Σ.
pub fn sample_mvn_factored(
    rng: &mut RngStream,
    mean: &[f64],
    factor: &CholeskyFactor,
) -> Result<Vec<f64>> {
    check_dim(factor.order(), mean.len())?;
    let z = sample_standard_normal(rng, mean.len());
    let mut x = factor.mul_vec(&z)?;
    for (xi, mi) in x.iter_mut().zip(mean) {
        *xi += mi;
    }
    Ok(x)
}

/// Draw from `N(mean, cov)`. Factors `cov` on every call; hot loops should
/// factor once and use [`sample_mvn_factored`].
pub fn sample_mvn(rng: &mut RngStream, mean: &[f64], cov: &SpdMatrix) -> Result<Vec<f64>> {
    check_dim(cov.order(), mean.len())?;
    let l = cholesky(cov)?;
    sample_mvn_factored(rng, mean, &l)
}
