//! Seeded randomness. Every stochastic choice in the crate draws from a
//! [`SplitMix64`] stream derived from a single user seed, so runs replay
//! exactly.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
pub use rand_xoshiro::SplitMix64;

/// Seeded generator used throughout the crate.
pub type SeededRng = SplitMix64;

pub fn seeded(seed: u64) -> SeededRng {
    SplitMix64::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose so that adding a new
/// consumer does not shift the draws of existing ones.
pub fn derive(seed: u64, stream: &str) -> SeededRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    SplitMix64::seed_from_u64(seed ^ h.rotate_left(17))
}

pub fn normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut SeededRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| normal(rng) * std).collect()
}

pub fn uniform_vec(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

