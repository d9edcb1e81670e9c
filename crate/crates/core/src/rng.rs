//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! whose seed is a pure function of a base seed and a path of integers, so any
//! sub-computation can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream tags keep unrelated consumers of one base seed apart.
pub mod stream {
    pub const WORLD: u64 = 1;
    pub const CREATIVE_LOG: u64 = 2;
    pub const CLICKED_LOG: u64 = 3;
    pub const REWARD_INIT: u64 = 4;
    pub const REWARD_TRAIN: u64 = 5;
    pub const PROMPT_INIT: u64 = 6;
    pub const PROMPT_TRAIN: u64 = 7;
    pub const DIFFUSION_INIT: u64 = 8;
    pub const DIFFUSION_PRETRAIN: u64 = 9;
    pub const LORA_TRAIN: u64 = 10;
    pub const GENERATE: u64 = 11;
    pub const SERVE: u64 = 12;
    pub const CLICKS: u64 = 13;
    pub const HOLDOUT: u64 = 14;
}
