//! Deterministic seed derivation and RNG construction.
//!
//! Every random draw in the toolkit comes from a ChaCha8 stream seeded by
//! [`derive`] over a tuple such as `(run_seed, epoch, sample_index, stream)`,
//! so results never depend on iteration order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named sub-streams so independent consumers never share draws.
pub mod stream {
    pub const PREPROCESS: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const ATTACK: u64 = 4;
    pub const CORRUPT: u64 = 5;
    pub const SUBSET: u64 = 6;
    pub const DELTA: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a tuple of integers.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6C61_6B74_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(parts: &[u64]) -> Rng {
    rng(derive(parts))
}
