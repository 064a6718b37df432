//! Seeded random streams. Every stochastic step (init, shuffles, sampling,
//! bootstrap) draws from its own stream derived from the run seed so that
//! changing one step never perturbs another.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

pub type Rng = SplitMix64;

pub fn seeded(seed: u64) -> Rng {
    SplitMix64::seed_from_u64(seed)
}

/// Child seed for a named stream and index.
pub fn derive(seed: u64, stream: &str, index: u64) -> u64 {
    let tag = crate::config::fnv1a(stream.as_bytes());
    let mut r = SplitMix64::seed_from_u64(seed ^ tag.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    r.next_u64()
}

/// A seed for runs that were not pinned.
pub fn fresh_seed() -> u64 {
    rand::random()
}
