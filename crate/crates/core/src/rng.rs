//! Seed derivation for reproducible ensembles.
//!
//! Run `i` of an ensemble with base seed `s` uses
//! `ChaCha8Rng::seed_from_u64(split_seed(s, i))`, where
//!
//! ```text
//! split_seed(s, i) = mix64(s ^ mix64(i + 0x9E3779B97F4A7C15))
//! mix64(v) = splitmix64 finalizer:
//!     v = (v ^ (v >> 30)) * 0xBF58476D1CE4E5B9
//!     v = (v ^ (v >> 27)) * 0x94D049BB133111EB
//!     v ^ (v >> 31)
//! ```
//!
//! with wrapping 64-bit arithmetic. The result depends only on `(s, i)`, so
//! any scheduling of runs over workers sees the same streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn mix64(mut v: u64) -> u64 {
    v = (v ^ (v >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    v = (v ^ (v >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    v ^ (v >> 31)
}

/// Seed of run `index` under `base`.
pub fn split_seed(base: u64, index: u64) -> u64 {
    mix64(base ^ mix64(index.wrapping_add(GOLDEN)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
