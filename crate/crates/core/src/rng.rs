//! Deterministic, portable random number streams.
//!
//! All randomness in the crate flows through ChaCha, a counter-based
//! generator whose output is identical across platforms. Independent
//! streams (one per chain, one per simulation replication, ...) are derived
//! from a single user seed with a SplitMix64 hash, so re-running any subset
//! of the work reproduces the same numbers regardless of thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide generator type.
pub type CrateRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(seed, index)`.
///
/// Used to give each chain / replication its own independent stream:
/// replication `r` of a study runs on `derive_seed(study_seed, r)`, and
/// chain `c` of a fit runs on stream `c` of the fit seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

/// Construct the generator for a given `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: u64) -> CrateRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
