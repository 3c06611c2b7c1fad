//! Seeded random streams.
//!
//! Every stochastic component owns a [`ChaCha8Rng`]; independent streams are
//! derived from a base seed by hashing `(base, domain, index)`, so a seed can
//! be split across workers, episodes and test-set entries without overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed for entry `index` of stream `domain`.
pub fn derive_seed(base: u64, domain: u64, index: u64) -> u64 {
    mix(mix(mix(base) ^ domain.rotate_left(17)) ^ index)
}

/// Maze seeds with the top bit set are reserved for held-out test sets;
/// training streams always clear it.
pub const TEST_DOMAIN_BIT: u64 = 1 << 63;

pub fn test_maze_seed(base: u64, index: u64) -> u64 {
    derive_seed(base, 0x7E57, index) | TEST_DOMAIN_BIT
}

pub fn train_maze_seed(base: u64, worker: u64, index: u64) -> u64 {
    derive_seed(derive_seed(base, 0x7_4A1, worker), 0x7_4A1, index) & !TEST_DOMAIN_BIT
}
