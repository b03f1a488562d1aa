//! Deterministic seed derivation for chains, iterations and trips.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with a sequence of indices into a new 64-bit key.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

/// A ChaCha stream keyed by `(seed, parts...)`.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

/// Uniform in [0, 1) keyed by `(seed, parts...)`; used where one draw per
/// key is enough (per-trip categorical sampling).
#[inline]
pub fn keyed_uniform(seed: u64, parts: &[u64]) -> f64 {
    (derive(seed, parts) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
