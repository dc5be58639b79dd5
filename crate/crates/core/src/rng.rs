//! Seeded random source with explicit state.
//!
//! Backed by xoshiro256++; all integer sampling goes through `u64` ranges so
//! streams do not depend on the platform's pointer width.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: Xoshiro256PlusPlus::seed_from_u64(seed) }
    }

    /// Seed this generator was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::index on an empty range");
        self.inner.random_range(0..n as u64) as usize
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        self.inner.random_range(lo as u64..=hi as u64) as usize
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct items from `pool`, in random order.
    pub fn choose_distinct<T: Clone>(&mut self, pool: &[T], k: usize) -> alloc::vec::Vec<T> {
        assert!(k <= pool.len());
        let mut idx: alloc::vec::Vec<usize> = (0..pool.len()).collect();
        for i in 0..k {
            let j = i + self.index(pool.len() - i);
            idx.swap(i, j);
        }
        idx[..k].iter().map(|&i| pool[i].clone()).collect()
    }

    /// Independent child generator; the parent stream advances by one word.
    pub fn fork(&mut self) -> Self {
        Self::new(self.next_u64())
    }
}
