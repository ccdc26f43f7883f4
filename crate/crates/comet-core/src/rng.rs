//! Seed derivation and sampling helpers.
//!
//! Every random decision in a run is drawn from a ChaCha8 stream seeded by
//! mixing the run seed with stable tags (stage index, parameter path, role),
//! so outputs are a pure function of the configuration and independent of
//! evaluation order.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math;

/// splitmix64 finalizer; decorrelates nearby seeds.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Mix a base seed with a sequence of tag words.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix(seed);
    for &t in tags {
        acc = splitmix(acc ^ t);
    }
    acc
}

/// FNV-1a over a string, for tagging seeds with parameter paths.
pub fn str_tag(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic stream for a derived seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in [0, 1).
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box-Muller; one draw consumes two uniforms.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Shift into (0, 1] so the log argument is never zero.
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = uniform(rng);
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(math::TAU * u2)
}
