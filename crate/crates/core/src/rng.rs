//! Seeded randomness.
//!
//! Every stochastic choice in the pipeline draws from a SplitMix64 generator
//! whose seed is derived from a base seed plus a purpose tag and a path of
//! indices (epoch, batch, sample, ...). Streams never share state, so results
//! do not depend on evaluation order or thread count.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

/// Purpose tags that split one base seed into independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Split = 3,
    EncoderDropout = 4,
    FusionDropout = 5,
    Synth = 6,
    Sample = 7,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `base`, a stream tag and an index path.
pub fn derive_seed(base: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut s = mix(base.wrapping_add(GOLDEN.wrapping_mul(stream as u64)));
    for &p in path {
        s = mix(s ^ p.wrapping_add(GOLDEN));
    }
    s
}

pub fn stream_rng(base: u64, stream: Stream, path: &[u64]) -> SplitMix64 {
    SplitMix64::seed_from_u64(derive_seed(base, stream, path))
}
