use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::Tensor;

/// A reproducible random stream identified by `(seed, label)`.
///
/// The ChaCha key is the seed followed by an FNV-1a hash of the label, so
/// streams with different labels are independent and every platform draws the
/// same sequence.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: String,
    inner: ChaCha8Rng,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl SeededRng {
    pub fn new(seed: u64, stream: &str) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&fnv1a(stream).to_le_bytes());
        Self {
            seed,
            stream: stream.to_owned(),
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// A child stream, e.g. `"noise"` → `"noise/epoch-3"`.
    pub fn derive(&self, suffix: &str) -> Self {
        Self::new(self.seed, &format!("{}/{}", self.stream, suffix))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> &str {
        &self.stream
    }

    /// Standard-normal tensor of the given shape.
    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut self.inner))
    }

    pub fn normal(&mut self, shape: &[usize], mean: f32, std: f32) -> Tensor {
        let dist = Normal::new(mean, std).expect("std must be finite and non-negative");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.inner))
    }

    pub fn uniform(&mut self, shape: &[usize], low: f32, high: f32) -> Tensor {
        Tensor::from_fn(shape, |_| self.inner.random_range(low..high))
    }

    /// A class index drawn uniformly from `0..classes`.
    pub fn uniform_class(&mut self, classes: usize) -> usize {
        assert!(classes >= 1, "need at least one class");
        self.inner.random_range(0..classes)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }
}
