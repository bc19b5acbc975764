//! Splittable seeding.
//!
//! Every random stream in the crate is derived from a 64-bit master seed by
//! a SplitMix64 step on `master ^ (stream + 1) * GOLDEN`, so stream `r` can
//! be reconstructed in isolation. Simulation replicate `r` uses stream `r`,
//! which makes results independent of execution order and thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer applied to `master` perturbed by the stream index.
pub fn split_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A ChaCha12 generator for the given derived stream.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(split_seed(master, stream))
}
