//! Deterministic random-stream derivation.
//!
//! A single 64-bit root seed deterministically derives independent streams,
//! one per model component (or per simulated chain), so parallel and serial
//! execution of embarrassingly-parallel work produce identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent stream from a root seed and a component tag.
///
/// The tag is mixed into the seed with splitmix64 so that nearby tags give
/// unrelated streams.
pub fn substream(root_seed: u64, tag: u64) -> ChaCha8Rng {
    let mut x = root_seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}
