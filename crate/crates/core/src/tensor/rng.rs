//! Seeded randomness.
//!
//! All stochastic choices in the crate (initialization, dataset synthesis,
//! shuffling, cropping, dropout) draw from [`SeededRng`], a ChaCha8 stream
//! keyed by a 64-bit seed. ChaCha output is specified bit-for-bit, so a seed
//! produces the same stream on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and `stream`.
    pub fn fork(&self, stream: u64) -> SeededRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        SeededRng {
            seed: self.seed ^ stream.rotate_left(32),
            inner: rng,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// I.i.d. uniform samples in `±√(3 / fan_in)`, giving variance `1 / fan_in`.
pub fn lecun_uniform_init(rng: &mut SeededRng, fan_in: usize, shape: &[usize]) -> Tensor {
    assert!(fan_in >= 1, "fan_in must be positive");
    let bound = (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(SeededRng::new(43).next_u64(), xs[0]);
    }

    #[test]
    fn forks_are_distinct_and_reproducible() {
        let root = SeededRng::new(7);
        let a: Vec<u64> = (0..4).map(|_| root.fork(1).next_u64()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(root.fork(1).next_u64(), root.fork(2).next_u64());
    }

    #[test]
    fn lecun_bounds() {
        let t = lecun_uniform_init(&mut SeededRng::new(1), 3, &[1000]);
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn lecun_deterministic() {
        let a = lecun_uniform_init(&mut SeededRng::new(9), 27, &[8, 3, 3, 3]);
        let b = lecun_uniform_init(&mut SeededRng::new(9), 27, &[8, 3, 3, 3]);
        assert_eq!(a, b);
    }

    #[test]
    fn lecun_variance_is_inverse_fan_in() {
        let t = lecun_uniform_init(&mut SeededRng::new(2024), 12, &[100_000]);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0 / 12.0).abs() <= 0.05 / 12.0, "variance {var}");
    }
}
