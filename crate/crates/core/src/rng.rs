//! Seed derivation for independent, reproducible random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; used to decorrelate derived seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a list of stream labels
/// (scene index, step, purpose tag, ...).
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Uniform index in `lo..hi`, drawn through `u64` so the result does not
/// depend on the platform's pointer width.
pub fn index_in(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo as u64..hi as u64) as usize
}

/// First `count` entries of a seeded Fisher-Yates shuffle of `0..n`.
pub fn fisher_yates_prefix(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = count.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = index_in(rng, i, n);
        order.swap(i, j);
    }
    order.truncate(count);
    order
}

/// Stream purposes, so that e.g. augmentation and masking of the same
/// scene never share random draws.
pub mod tag {
    pub const AUGMENT: u64 = 1;
    pub const MASK: u64 = 2;
    pub const KEYPOINTS: u64 = 3;
    pub const INIT: u64 = 4;
    pub const EPOCH: u64 = 5;
    pub const SCENE: u64 = 6;
    pub const PROBE_SPLIT: u64 = 7;
    pub const LEAKAGE: u64 = 8;
    pub const PROBE_SCENE: u64 = 9;
}
