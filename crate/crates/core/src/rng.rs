//! Seeded random streams.
//!
//! Every stochastic step draws from a [`ChaCha8Rng`] whose seed is a pure
//! function of a master seed and a stream label, so parallel callers can
//! split work without sharing generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser applied to `master + golden·(index + 1)`.
///
/// This is the documented per-network seed derivation:
/// `mix(master, i) = splitmix64(master + 0x9E3779B97F4A7C15 * (i + 1))`
/// with wrapping arithmetic.
pub fn mix(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream labels used to derive independent sub-seeds from one seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    LearningRate = 3,
    Hessian = 4,
    Split = 5,
    Synthetic = 6,
    Permutation = 7,
}

pub fn substream(seed: u64, stream: Stream) -> u64 {
    mix(seed, 0x5EED_0000 + stream as u64)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(seed: u64, stream: Stream) -> Rng {
    rng(substream(seed, stream))
}
