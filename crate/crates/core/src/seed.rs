//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a 64-bit value derived from the user seed and a path of
//! stream tags, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `tag` under `seed`.
pub fn derive(seed: u64, tag: u64) -> u64 {
    mix(mix(seed.wrapping_add(GOLDEN)) ^ tag.wrapping_mul(GOLDEN).rotate_left(17))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    rng(derive(seed, tag))
}

// Stream tags.
pub(crate) const TAG_FACTORS: u64 = 1;
pub(crate) const TAG_LOADINGS: u64 = 2;
pub(crate) const TAG_NOISE_X: u64 = 3;
pub(crate) const TAG_SUPPORT: u64 = 4;
pub(crate) const TAG_RESPONSE: u64 = 5;
pub(crate) const TAG_FOLDS: u64 = 10;
pub(crate) const TAG_SETTING: u64 = 11;
pub(crate) const TAG_INIT: u64 = 20;
pub(crate) const TAG_DROPOUT: u64 = 21;
pub(crate) const TAG_SHUFFLE: u64 = 22;
pub(crate) const TAG_REPLICATE: u64 = 30;
pub(crate) const TAG_KNOCKOFF: u64 = 31;
pub(crate) const TAG_GRID: u64 = 32;
pub(crate) const TAG_ENSEMBLE: u64 = 33;
pub(crate) const TAG_REPEAT: u64 = 34;
