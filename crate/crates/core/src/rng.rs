//! Deterministic random-number utilities.
//!
//! Every stochastic component in the crate (weight init, minibatch
//! shuffling, sampling noise, dataset generation) draws from a
//! [`rand_chacha::ChaCha8Rng`] seeded through [`derive_seed`], so that a
//! single `u64` master seed reproduces a whole experiment bit-for-bit,
//! and distinct subsystems get decorrelated streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a master seed with a stream label into an independent child seed.
///
/// Uses the splitmix64 finalizer, which maps nearby inputs to
/// statistically independent outputs.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Creates a deterministic RNG for a labelled stream of a master seed.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}
