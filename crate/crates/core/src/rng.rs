//! Seed derivation. Every random draw in the pipeline comes from a
//! [`ChaCha8Rng`] seeded via [`derive_seed`] from one master seed and a
//! named purpose, so parallel and serial runs see the same streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::text::fnv1a64;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed for `purpose` (e.g. `"eval/split3/episode17"`).
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a64(purpose.as_bytes())))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(master: u64, purpose: &str) -> ChaCha8Rng {
    rng_from_seed(derive_seed(master, purpose))
}
