//! Seed derivation. Every randomised operation owns a ChaCha stream keyed by a
//! base seed plus a stream tag, so adding a new consumer never shifts the draws
//! of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tag: u64) -> u64 {
    mix(seed ^ mix(tag))
}

pub fn stream(seed: u64, tag: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

// Stream tags.
pub const TAG_CENTERS: u64 = 1;
pub const TAG_SAMPLES: u64 = 2;
pub const TAG_NOISE: u64 = 3;
pub const TAG_INIT: u64 = 4;
pub const TAG_SHUFFLE: u64 = 5;
pub const TAG_AUGMENT: u64 = 6;
pub const TAG_MIXUP: u64 = 7;
pub const TAG_HARD: u64 = 8;
pub const TAG_TEST_SPLIT: u64 = 9;
