//! Deterministic seed derivation. Every stochastic stage draws from its own
//! ChaCha8 stream keyed by `(base seed, stage tag, index)`, so results do not
//! depend on thread scheduling or on the order stages run in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ fnv1a(tag)).wrapping_add(index))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    rng_from(derive_seed(base, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct_and_stable() {
        assert_eq!(derive_seed(42, "kmeans", 0), derive_seed(42, "kmeans", 0));
        assert_ne!(derive_seed(42, "kmeans", 0), derive_seed(42, "kmeans", 1));
        assert_ne!(derive_seed(42, "kmeans", 0), derive_seed(42, "boot", 0));
        assert_ne!(derive_seed(42, "kmeans", 0), derive_seed(43, "kmeans", 0));
    }
}
