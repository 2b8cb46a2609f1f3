//! Seeded random source shared by the robustness runs and the test fixtures.
//!
//! Backed by ChaCha8, a counter-based stream cipher generator whose output is
//! specified independently of the host platform.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Name of the generator algorithm, written into reports.
pub const RNG_ALGORITHM: &str = "chacha8";

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, e.g. one per worker or per run.
    pub fn fork(&mut self, stream: u64) -> Rng {
        let mut child = ChaCha8Rng::seed_from_u64(self.seed);
        child.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner: child,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    /// `n` samples from N(mean, variance).
    pub fn gaussian(&mut self, mean: f64, variance: f64, n: usize) -> Result<Vec<f64>> {
        gaussian_sample(self, mean, variance, n)
    }
}

pub fn gaussian_sample(rng: &mut Rng, mean: f64, variance: f64, n: usize) -> Result<Vec<f64>> {
    if variance.is_nan() || variance < 0.0 || !variance.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "variance must be a finite non-negative number, got {variance}"
        )));
    }
    if variance == 0.0 {
        return Ok(vec![mean; n]);
    }
    let normal = Normal::new(mean, variance.sqrt())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((0..n).map(|_| normal.sample(&mut rng.inner)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_is_constant() {
        let mut rng = Rng::new(1);
        assert_eq!(rng.gaussian(0.3, 0.0, 5).unwrap(), vec![0.3; 5]);
    }

    #[test]
    fn negative_variance_rejected() {
        let mut rng = Rng::new(1);
        assert!(matches!(
            rng.gaussian(0.0, -0.1, 3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn sample_variance_matches() {
        let mut rng = Rng::new(7);
        let xs = rng.gaussian(0.0, 0.01, 100_000).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.01).abs() <= 0.01 * 0.05, "variance {var}");
        assert!(mean.abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn same_seed_same_stream() {
        let a = Rng::new(42).gaussian(1.0, 2.0, 64).unwrap();
        let b = Rng::new(42).gaussian(1.0, 2.0, 64).unwrap();
        assert_eq!(a, b);
        let mut p = Rng::new(42);
        let mut q = Rng::new(42);
        assert_eq!(p.fork(3).next_u64(), q.fork(3).next_u64());
        assert_ne!(Rng::new(42).fork(1).next_u64(), Rng::new(42).fork(2).next_u64());
    }
}
