//! Keyed, splittable random streams.
//!
//! Every unit of parallel work (ensemble member, refinement iteration, grid
//! cell, repetition) derives its own stream from the master seed and its
//! indices, so results are independent of scheduling and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A point in the seed tree. `child(i)` derives a statistically independent
/// subtree; `rng()` instantiates the generator for this node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream(u64);

// SplitMix64 finalizer; full-period bijection with good avalanche.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream(mix(seed))
    }

    pub fn child(&self, index: u64) -> Self {
        SeedStream(mix(self.0 ^ mix(index.wrapping_add(0xa076_1d64_78bd_642f))))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
