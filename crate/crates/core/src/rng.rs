//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] whose seed is
//! derived from a run seed and a stream tag, so independent consumers never
//! share or perturb each other's sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags for [`derive_seed`].
pub mod stream {
    pub const STUDENT_INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SLT_INIT: u64 = 3;
    pub const CLASS_MEANS: u64 = 10;
    pub const SAMPLES: u64 = 11;
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finaliser over `seed` and `tag`; distinct tags give
/// statistically independent seeds.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
