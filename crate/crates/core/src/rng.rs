//! Seed derivation. Every stochastic step gets its own generator derived from
//! the run seed and a task path, so results never depend on call order or
//! thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of task coordinates.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(seed: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, path))
}

/// Stream tags for [`rng_for`] paths.
pub mod stream {
    pub const SYNTH: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const FEATURES: u64 = 3;
    pub const SHARES: u64 = 4;
    pub const LABELS: u64 = 5;
    pub const INIT: u64 = 6;
    pub const PRETRAIN: u64 = 7;
    pub const SELECT: u64 = 8;
    pub const LOCAL: u64 = 9;
    pub const PSEUDO: u64 = 10;
    pub const CORPUS: u64 = 11;
    pub const XI: u64 = 12;
}
