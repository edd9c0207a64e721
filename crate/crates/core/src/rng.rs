//! Seed derivation helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer; maps `(base, stream)` to a well-mixed seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(base: u64, stream: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, stream))
}

/// Tags for independent random streams derived from one run seed.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const IDM: u64 = 2;
    pub const DYNAMICS: u64 = 3;
    pub const VALUE: u64 = 4;
    pub const DIFFUSER: u64 = 5;
    pub const GENERATE: u64 = 6;
    pub const STITCH: u64 = 7;
    pub const BC: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const PAIR_DIFFUSER: u64 = 10;
}
