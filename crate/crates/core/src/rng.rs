//! Seeded, portable random streams.
//!
//! Everything random in this crate draws from xoshiro256++ seeded through
//! SplitMix64 (`seed_from_u64`), so fixtures regenerate identically on any
//! platform and thread count.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type SeededRng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> SeededRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a stream label.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // SplitMix64 finalizer over the combined word.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `K` distinct indices in `0..n`. Requires `n ≥ K`.
pub(crate) fn distinct_indices<const K: usize>(rng: &mut SeededRng, n: usize) -> [usize; K] {
    debug_assert!(n >= K);
    let mut out = [0usize; K];
    let mut i = 0;
    while i < K {
        let c = rng.random_range(0..n);
        if !out[..i].contains(&c) {
            out[i] = c;
            i += 1;
        }
    }
    out
}
