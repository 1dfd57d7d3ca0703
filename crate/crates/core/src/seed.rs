//! All randomness funnels through one base seed. Stages derive independent
//! streams by mixing the base with a stage label and an index, so corpus
//! generation, training and every evaluation trial are reproducible and
//! mutually uncorrelated.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derived seed = mix(mix(base) ^ hash(stage)) ^ index, mixed once more.
pub fn derive(base: u64, stage: &str, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ fnv1a(stage)) ^ index)
}

/// Seeded generator for one (stage, index) stream.
pub fn rng(base: u64, stage: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, stage, index))
}
