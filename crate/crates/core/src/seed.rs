//! Seed derivation. Every random stream in the crate is a ChaCha stream keyed
//! by a 64-bit seed and selected by an explicit stream number, so results do
//! not depend on the platform RNG or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_DATA: u64 = 3;
pub const STREAM_SUBSAMPLE: u64 = 4;

/// A generator for `(seed, stream)`. Streams are counter-based and independent.
pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for the shuffle of one epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    rng(seed, STREAM_SHUFFLE.wrapping_add((epoch as u64) << 8))
}
