//! Counter-based seeding.
//!
//! Every random stream is derived from `(master_seed, stream_id, index)` by
//! a SplitMix64 mixing chain, so path `j` of a batch draws the same numbers
//! regardless of chunking or thread scheduling.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

pub type PathRng = Xoshiro256PlusPlus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix3(a: u64, b: u64, c: u64) -> u64 {
    splitmix(splitmix(splitmix(a) ^ b) ^ c)
}

impl SeedSpec {
    pub const fn new(master_seed: u64, stream_id: u64) -> Self {
        Self { master_seed, stream_id }
    }

    /// Independent generator for item `index` (a path, a run, a step).
    pub fn rng_for(&self, index: u64) -> PathRng {
        PathRng::seed_from_u64(mix3(self.master_seed, self.stream_id, index))
    }

    /// A child seed namespace, e.g. for per-step batches inside a run.
    pub fn child(&self, tag: u64) -> SeedSpec {
        SeedSpec {
            master_seed: mix3(self.master_seed, self.stream_id, tag ^ 0x5eed_c41d),
            stream_id: tag,
        }
    }
}

const PARTICLE_TAG: u64 = 0x7061_7274_6963_6c65;

/// Time index sampled for path `path` by the particle estimator, uniform on
/// `{0, ..., intervals - 1}`.
pub fn particle_index(seed: &SeedSpec, path: usize, intervals: usize) -> usize {
    let mut rng = seed.child(PARTICLE_TAG).rng_for(path as u64);
    rng.random_range(0..intervals)
}
