//! Seeded, platform-independent random streams.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Clamp applied to uniforms before the double log of the Gumbel transform.
pub const GUMBEL_CLAMP: f64 = 1e-12;

/// ChaCha8 stream. Same seed and same call sequence give the same samples on
/// every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` under master seed `seed`.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * self.normal()).collect();
        Tensor::new(shape, data).expect("shape product matches")
    }

    pub fn uniform_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.uniform()).collect();
        Tensor::new(shape, data).expect("shape product matches")
    }

    /// I.i.d. standard Gumbel samples, `G = -ln(-ln U)`.
    pub fn gumbel(&mut self, shape: &[usize]) -> Tensor {
        self.uniform_tensor(shape).map(gumbel_from_uniform)
    }

    /// `k` distinct indices from `0..n`, sorted ascending.
    pub fn choose_sorted(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.inner, n, k).into_vec();
        picked.sort_unstable();
        picked
    }
}

/// The Gumbel transform of one uniform, with `u` clamped to `(δ, 1-δ)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
    -(-u.ln()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_fixed_point() {
        assert_eq!(gumbel_from_uniform((-1f64).exp()), 0.0);
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut rng = Rng::new(7);
        let g = rng.gumbel(&[1_000_000]);
        let mean = g.sum() / g.len() as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn same_seed_same_stream() {
        let a = Rng::new(42).gumbel(&[3, 5]);
        let b = Rng::new(42).gumbel(&[3, 5]);
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(Rng::substream(42, 1).next_u64(), Rng::substream(42, 2).next_u64());
    }

    #[test]
    fn choose_sorted_is_distinct() {
        let mut rng = Rng::new(3);
        let k = rng.choose_sorted(10, 10);
        assert_eq!(k, (0..10).collect::<Vec<_>>());
        let k = rng.choose_sorted(100, 7);
        assert!(k.windows(2).all(|w| w[0] < w[1]));
    }
}
