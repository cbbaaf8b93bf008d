//! Reproducible random streams.
//!
//! All randomness goes through ChaCha20, a counter-based generator whose
//! output depends only on `(key, stream, counter)`, so draws are identical
//! across platforms and thread counts. Stream assignments:
//!
//! | stream          | key          | used for                                    |
//! |-----------------|--------------|---------------------------------------------|
//! | `0`             | `param_seed` | true coefficients and loadings              |
//! | `1 + s`         | `seed`       | covariates, factors and noise of study `s`  |
//!
//! Replication seeds for benchmark runs come from [`sub_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StreamRng = ChaCha20Rng;

pub const PARAM_STREAM: u64 = 0;

fn keyed(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream that draws the fixed model parameters.
pub fn param_rng(param_seed: u64) -> StreamRng {
    keyed(param_seed, PARAM_STREAM)
}

/// Stream that draws everything random about study `s`.
pub fn study_rng(seed: u64, s: usize) -> StreamRng {
    keyed(seed, 1 + s as u64)
}

/// SplitMix64 finalizer; maps `(seed, index)` to a well-mixed child seed.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
