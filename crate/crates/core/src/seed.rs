//! Deterministic seed derivation.
//!
//! Every random draw in this crate flows through a ChaCha stream whose seed is
//! derived from a master seed plus a list of stream labels (instance index,
//! attack id, leaf id, ...). Derivation uses splitmix64 mixing, which is fixed
//! for all time and identical on every platform, so results never depend on
//! thread scheduling or on the standard library's hash implementation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; bijective on u64.
#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Folds `parts` into `master` one word at a time. Order matters.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

/// ChaCha stream for a derived seed.
pub fn stream(master: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}
