//! Seed derivation.
//!
//! Every random draw in the toolkit comes from a ChaCha stream whose seed is
//! derived from a root seed plus a stream name and indices. Derived streams
//! are independent of each other, so enabling a feature that consumes one
//! stream never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for the `name` stream at the given indices.
pub fn derive_seed(root: u64, name: &str, indices: &[u64]) -> u64 {
    let mut s = mix64(root ^ mix64(name_hash(name)));
    for &i in indices {
        s = mix64(s ^ mix64(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    s
}

pub fn stream(root: u64, name: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name, indices))
}
