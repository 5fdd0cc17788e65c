//! Internal seeding discipline.
//!
//! Every stochastic stage takes an explicit `u64` seed. Sub-seeds for the
//! independent stages of one observation (data fill, channel taps, noise,
//! jammer) are derived with a splitmix64 finalizer so that no two stages
//! share a stream and derivation is stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Derive a decorrelated sub-seed from a base seed and a role salt.
pub(crate) fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for a given seed.
pub(crate) fn chacha(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
