//! Seed derivation shared by every randomized component.
//!
//! All randomness is keyed by a tuple of indices rather than by draw order,
//! so parallel schedules never change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer. A bijection on `u64`.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `(global_seed, cell, item)` into one seed.
///
/// Each stage is a SplitMix64 step over the running state xor-ed with the
/// next component, so the function depends only on the tuple. This is a
/// stable, documented format: changing it changes every benchmark number.
pub fn derive_seed(global_seed: u64, cell: u64, item: u64) -> u64 {
    let h = splitmix64(global_seed);
    let h = splitmix64(h ^ cell.wrapping_mul(0xd6e8_feb8_6659_fd93));
    splitmix64(h ^ item.wrapping_mul(0xa076_1d64_78bd_642f))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable 64-bit hash of a label, used to give named components their own
/// seed streams.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_tuple_same_seed() {
        assert_eq!(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
    }

    #[test]
    fn no_collisions_over_benchmark_ranges() {
        let mut seen = HashSet::new();
        for g in 0..4u64 {
            for cell in 0..256u64 {
                for item in 0..512u64 {
                    assert!(seen.insert(derive_seed(g, cell, item)), "collision at {g} {cell} {item}");
                }
            }
        }
    }
}
