//! Seeded random streams.
//!
//! A run has one seed. Each consumer (initialization, dropout, batching,
//! synthesis, projection, probing) draws from its own ChaCha stream so that
//! enabling one consumer never shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Batching = 3,
    Synth = 4,
    Projection = 5,
    Probe = 6,
    Fixture = 7,
}

/// A generator for `(seed, stream, index)`. `index` separates sub-streams,
/// e.g. one per epoch or one per synthetic video.
pub fn stream_rng(seed: u64, stream: Stream, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | index as u64);
    rng
}
