//! Seeded randomness helpers.
//!
//! Every stochastic operation in this crate draws from a [`ChaCha8Rng`]
//! through the raw `next_u64` stream and the conversions below. The ChaCha8
//! keystream is algorithmically fixed, so all results are a pure function of
//! the seed and survive dependency upgrades.

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer; used to derive child seeds for named streams.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed for stream `stream` of a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

/// Uniform draw in [0, 1) with 53-bit resolution.
pub fn u01(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * u01(rng)
}

/// Uniform index in [0, n). Modulo reduction; the bias is immaterial at the
/// dataset sizes this crate targets and keeps the draw a pure function of
/// one stream word.
pub fn index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    (rng.next_u64() % n as u64) as usize
}

/// Fisher-Yates shuffle driven by [`index`]: for i from n-1 down to 1,
/// swap position i with a uniform j in [0, i].
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = index(rng, i + 1);
        items.swap(i, j);
    }
}
