//! Seed derivation. Every random draw in the workbench is keyed by a base
//! seed plus a tag path, so work can be split and reordered freely without
//! changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a path of tags into a new 64-bit seed.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    rng(derive(base, tags))
}

// Tag namespaces.
pub(crate) const TAG_FRAME: u64 = 1;
pub(crate) const TAG_CHANNEL: u64 = 2;
pub(crate) const TAG_NOISE: u64 = 3;
pub(crate) const TAG_AUGMENT: u64 = 4;
pub(crate) const TAG_SHUFFLE: u64 = 5;
pub(crate) const TAG_INIT: u64 = 6;
pub(crate) const TAG_SPLIT: u64 = 7;
pub(crate) const TAG_VALIDATION: u64 = 8;
pub(crate) const TAG_KMEANS: u64 = 9;
pub(crate) const TAG_MMSE: u64 = 10;
pub(crate) const TAG_EVAL: u64 = 11;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_order_sensitive() {
        assert_ne!(derive(1, &[2, 3]), derive(1, &[3, 2]));
        assert_eq!(derive(1, &[2, 3]), derive(1, &[2, 3]));
        assert_ne!(derive(1, &[]), derive(2, &[]));
    }
}
