//! Seeded, platform-independent random numbers.
//!
//! A run owns a single root seed. Subsystems (environment, encoder, weight
//! init, exploration, replay) take their own stream via [`Rng::derive`], so
//! the number of draws one subsystem makes never shifts another's sequence.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream named by `label`. Depends only on the seed,
    /// the parent's own label path and `label`, never on the parent's state.
    pub fn derive(&self, label: &str) -> Self {
        let stream = fnv1a(label.as_bytes(), fnv1a(&self.stream.to_le_bytes(), FNV_OFFSET));
        Self::with_stream(self.seed, stream)
    }

    pub fn derive_indexed(&self, label: &str, index: u64) -> Self {
        let base = self.derive(label);
        let stream = fnv1a(&index.to_le_bytes(), base.stream);
        Self::with_stream(self.seed, stream)
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    #[inline]
    pub fn uniform_f32(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn exponential(&mut self) -> f64 {
        Exp1.sample(&mut self.inner)
    }
}

impl RngCore for Rng {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_give_equal_streams() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_ignore_parent_draws() {
        let root = Rng::new(5);
        let mut used = root.clone();
        for _ in 0..1000 {
            used.next_u64();
        }
        let mut a = root.derive("env");
        let mut b = used.derive("env");
        assert_eq!(a.next_u64(), b.next_u64());

        let mut c = root.derive("encoder");
        let mut d = root.derive("env");
        d.next_u64();
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn indexed_children_differ() {
        let root = Rng::new(1);
        let mut x = root.derive_indexed("trial", 0);
        let mut y = root.derive_indexed("trial", 1);
        assert_ne!(x.next_u64(), y.next_u64());
    }

    #[test]
    fn first_draws_are_pinned() {
        // Fails if the generator or its seeding scheme changes, which would
        // silently invalidate recorded runs.
        let mut r = Rng::new(0);
        let first: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        assert_eq!(
            first,
            [13080132717333068652, 8594738769458413623, 12896916468484187878]
        );
        assert_eq!(Rng::new(0).derive("env").next_u64(), 9524382717256215183);
    }
}
