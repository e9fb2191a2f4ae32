//! Seed derivation and the crate's deterministic RNG.
//!
//! All randomness flows from explicit 64-bit seeds. Sub-streams (one image,
//! one mask, one training run) get their own seed derived by hashing the
//! parent seed with a word path, so renders can happen in any order — or in
//! parallel — without changing a single pixel.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The RNG used everywhere in the crate.
pub type Rng = ChaCha12Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer; good avalanche for cheap seed mixing.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a word path.
///
/// `derive_seed(s, &[a, b])` differs from `derive_seed(s, &[b, a])` and from
/// `derive_seed(s, &[a])`; the path acts like a hierarchical stream name.
pub fn derive_seed(parent: u64, path: &[u64]) -> u64 {
    let mut state = mix(parent ^ 0x517c_c1b7_2722_0a95);
    for (i, w) in path.iter().enumerate() {
        state = mix(state ^ w.wrapping_add((i as u64).wrapping_mul(0xd6e8_feb8_6659_fd93)));
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derivation_is_deterministic_and_path_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(7, &[1, 0]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn rng_streams_reproduce() {
        let mut a = rng_from_seed(99);
        let mut b = rng_from_seed(99);
        for _ in 0..16 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }
}
