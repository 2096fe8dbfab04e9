//! Seed derivation for independent, reproducible random streams.
//!
//! Every consumer of randomness takes an explicit generator. Child streams
//! are derived from a parent seed plus a tag and an index, so adding a new
//! consumer never perturbs the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn hash_tag(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

/// Derive a child seed from `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ hash_tag(tag)).wrapping_add(splitmix64(index)))
}

pub fn stream(seed: u64, tag: &str, index: u64) -> LabRng {
    LabRng::seed_from_u64(derive_seed(seed, tag, index))
}
