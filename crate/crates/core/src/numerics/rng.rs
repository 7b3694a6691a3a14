use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded random stream. Same seed and same call sequence give identical
/// draws on a given platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of draw calls made so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent child stream keyed by `label`.
    pub fn fork(&self, label: u64) -> Self {
        Self::new(splitmix64(
            self.seed ^ splitmix64(label.wrapping_add(0x9e37_79b9_7f4a_7c15)),
        ))
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        self.counter += 1;
        let z: f64 = StandardNormal.sample(&mut self.inner);
        z * std
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal(std)).collect()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.counter += 1;
        self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.counter += 1;
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        self.counter += 1;
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n` (all of them, shuffled, when `k >= n`).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        self.counter += 1;
        if k >= n {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut self.inner);
            return all;
        }
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
