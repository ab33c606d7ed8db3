//! Named, splittable random streams.
//!
//! Every random draw in the crate comes from a [`SeedTree`] rooted at a single
//! `u64`. Components ask for a stream by name, so adding a new consumer never
//! perturbs the numbers an existing one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Subtree for `name`; distinct names give statistically independent trees.
    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree {
            seed: splitmix64(self.seed ^ fnv1a(name.as_bytes())),
        }
    }

    /// Subtree for an indexed sibling, e.g. one per epoch.
    pub fn index(&self, i: u64) -> SeedTree {
        SeedTree {
            seed: splitmix64(self.seed.wrapping_add(splitmix64(i ^ 0x6a09_e667_f3bc_c908))),
        }
    }

    pub fn rng(&self, name: &str) -> Rng {
        let mut rng = Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
