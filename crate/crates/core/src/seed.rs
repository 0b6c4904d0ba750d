//! Seed derivation. Every random stream in a run is keyed by the run seed
//! plus a path of integers (purpose, client, round, …), so adding or removing
//! one consumer never shifts another's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(seed: u64, path: &[u64]) -> Rng {
    rng_from(derive_seed(seed, path))
}

/// Stream purposes used with [`derive_rng`].
pub mod purpose {
    pub const SAMPLING: u64 = 1;
    pub const CLIENT_GLOBAL: u64 = 2;
    pub const CLIENT_LOCAL: u64 = 3;
    pub const FINETUNE: u64 = 4;
    pub const WEIGHTING: u64 = 5;
    pub const ADAPTER_INIT: u64 = 6;
    pub const CENTRAL: u64 = 7;
}
