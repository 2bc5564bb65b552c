//! Seeded randomness. Every stochastic step derives its own stream from a
//! base seed plus a label, so results do not depend on call order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StdRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StdRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic child seed for `(base, label, index)`.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label, then mixed with the base and index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(base ^ h).wrapping_add(index))
}

pub fn derived(base: u64, label: &str, index: u64) -> StdRng {
    seeded(derive_seed(base, label, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(7, "aug", 3), derive_seed(7, "aug", 3));
        assert_ne!(derive_seed(7, "aug", 3), derive_seed(7, "aug", 4));
        assert_ne!(derive_seed(7, "aug", 3), derive_seed(7, "agu", 3));
        assert_ne!(derive_seed(7, "aug", 3), derive_seed(8, "aug", 3));
    }
}
