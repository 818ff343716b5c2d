//! Deterministic random streams.
//!
//! Every stochastic choice in this crate draws from a [`SeedStream`], a thin
//! wrapper over the ChaCha8 stream cipher RNG (RFC 8439 core). ChaCha8 is
//! seedable, platform-stable, and its word position can be captured and
//! restored, which is what checkpoint resume relies on.
//!
//! The value mappings are fixed here rather than delegated to a distributions
//! library so that the byte streams stay reproducible across toolchain and
//! dependency upgrades:
//!
//! * `uniform()`   = `(next_u64() >> 11) * 2^-53`, the usual 53-bit mapping
//!   onto `[0, 1)`.
//! * `normal()`    = Box-Muller on two `uniform()` draws (second value of the
//!   pair is cached).
//! * `below(n)`    = `next_u64() % n`. The modulo bias is below 2^-53 for
//!   every `n` used in this crate.
//! * `shuffle`     = Fisher-Yates driven by `below`.
//!
//! Sub-seeds are derived with FNV-1a 64 over the parent seed's little-endian
//! bytes, a `0x1f` separator, and a UTF-8 tag, so independent stages never
//! share a stream by accident.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a sub-seed from a parent seed and a tag.
pub fn derive_seed(parent: u64, tag: &str) -> u64 {
    let mut buf = Vec::with_capacity(9 + tag.len());
    buf.extend_from_slice(&parent.to_le_bytes());
    buf.push(0x1f);
    buf.extend_from_slice(tag.as_bytes());
    fnv1a64(&buf)
}

/// Deterministic random stream. See the module docs for the value mappings.
pub struct SeedStream {
    rng: ChaCha8Rng,
    seed: u64,
    spare_normal: Option<f64>,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            spare_normal: None,
        }
    }

    /// Stream seeded by `derive_seed(parent, tag)`.
    pub fn derived(parent: u64, tag: &str) -> Self {
        SeedStream::new(derive_seed(parent, tag))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller. Draws two uniforms per pair and
    /// caches the second value.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.normal()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Sample `k` distinct elements from `pool` (partial Fisher-Yates).
    pub fn sample_distinct(&mut self, pool: &[usize], k: usize) -> Vec<usize> {
        assert!(k <= pool.len());
        let mut pool = pool.to_vec();
        for i in 0..k {
            let j = i + self.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// Word position of the underlying ChaCha stream, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Restore a stream captured by [`SeedStream::word_pos`]. The cached
    /// Box-Muller value is not part of the state; trainers only checkpoint
    /// at points where no spare is held.
    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(word_pos);
        SeedStream {
            rng,
            seed,
            spare_normal: None,
        }
    }

    /// True when no Box-Muller spare is cached (safe to capture state).
    pub fn is_word_aligned(&self) -> bool {
        self.spare_normal.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_reference_vectors() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn streams_are_reproducible() {
        let mut a = SeedStream::new(42);
        let mut b = SeedStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ_by_tag() {
        let a = derive_seed(7, "phantom");
        let b = derive_seed(7, "train");
        assert_ne!(a, b);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut s = SeedStream::new(1);
        for _ in 0..1000 {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut s = SeedStream::new(3);
        let n = 20000;
        let xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn restore_resumes_stream() {
        let mut s = SeedStream::new(11);
        for _ in 0..17 {
            s.next_u64();
        }
        let pos = s.word_pos();
        let tail: Vec<u64> = (0..10).map(|_| s.next_u64()).collect();
        let mut r = SeedStream::restore(11, pos);
        let tail2: Vec<u64> = (0..10).map(|_| r.next_u64()).collect();
        assert_eq!(tail, tail2);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut s = SeedStream::new(5);
        let mut v: Vec<usize> = (0..50).collect();
        s.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn sample_distinct_has_no_repeats() {
        let mut s = SeedStream::new(9);
        let pool: Vec<usize> = (0..20).collect();
        let picked = s.sample_distinct(&pool, 8);
        assert_eq!(picked.len(), 8);
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
    }
}
