//! Deterministic random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the
//! scenario seed plus a list of tags, so results do not depend on thread
//! scheduling or on the order in which cells are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed with a sequence of tags into a single 64-bit key.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Independent stream keyed by `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> SimRng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}

/// Tags used to separate the randomness of different subsystems.
pub mod tag {
    pub const PLACEMENT: u64 = 1;
    pub const INTRA: u64 = 2;
    pub const INTER_SMALL: u64 = 3;
    pub const INTER_LARGE: u64 = 4;
    pub const SENSING: u64 = 5;
    pub const CKM: u64 = 6;
    pub const CALIBRATION: u64 = 7;
    pub const CSI_NOISE: u64 = 8;
}
