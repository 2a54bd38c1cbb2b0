//! Seed derivation. A master seed fans out through splitmix64 into
//! independent streams for initialization, augmentation, subsetting and
//! shuffling; labelled sub-streams hash the label into the stream seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed of the sub-stream named `label` under `seed`.
pub fn derive(seed: u64, label: &str) -> u64 {
    let mut s = seed ^ fnv1a(label);
    splitmix64(&mut s)
}

pub fn rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub master: u64,
    pub init: u64,
    pub augment: u64,
    pub subset: u64,
    pub shuffle: u64,
}

impl SeedPlan {
    pub fn from_master(master: u64) -> Self {
        let mut state = master;
        Self {
            master,
            init: splitmix64(&mut state),
            augment: splitmix64(&mut state),
            subset: splitmix64(&mut state),
            shuffle: splitmix64(&mut state),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // first outputs for state 0 of the published reference generator
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(&mut s), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn streams_differ() {
        let p = SeedPlan::from_master(7);
        let all = [p.init, p.augment, p.subset, p.shuffle];
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_eq!(p, SeedPlan::from_master(7));
        assert_ne!(derive(1, "a"), derive(1, "b"));
    }
}
