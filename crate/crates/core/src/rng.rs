//! Deterministic random streams.
//!
//! The generator is xoshiro256** seeded through SplitMix64. Every derived
//! quantity is defined on top of the raw 64-bit stream so that two
//! implementations of the same algorithms draw identical masks:
//!
//! - `uniform`: `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! - `below(n)`: Lemire's multiply-shift with rejection, unbiased in `[0, n)`.
//! - `normal`: Box-Muller cosine branch, two uniforms per draw, no caching.
//! - `split(i)`: a fresh generator seeded with `mix(seed, i)`; it depends only
//!   on the parent's seed and `i`, never on how many draws the parent made.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for `index`. Children with distinct indices are
    /// independent of each other and of the parent's position.
    pub fn split(&self, index: u64) -> Rng {
        let salt = mix64(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
        Rng::new(mix64(self.seed ^ salt))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. Panics when `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is empty");
        let mut m = (self.next_u64() as u128) * (n as u128);
        let mut lo = m as u64;
        if lo < n {
            let threshold = n.wrapping_neg() % n;
            while lo < threshold {
                m = (self.next_u64() as u128) * (n as u128);
                lo = m as u64;
            }
        }
        (m >> 64) as u64
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Partial Fisher-Yates over `items`: after the call the first `k`
    /// entries are a uniform sample without replacement, drawn in order
    /// `i = 0..k` with `j = i + below(len - i)`.
    pub fn partial_shuffle<T>(&mut self, items: &mut [T], k: usize) {
        let n = items.len();
        assert!(k <= n, "cannot draw {k} of {n}");
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct values from `pool`, in draw order.
    pub fn sample_from<T: Copy>(&mut self, pool: &[T], k: usize) -> Vec<T> {
        let mut scratch = pool.to_vec();
        self.partial_shuffle(&mut scratch, k);
        scratch.truncate(k);
        scratch
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let pool: Vec<usize> = (0..n).collect();
        self.sample_from(&pool, k)
    }
}
