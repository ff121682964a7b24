//! Reproducible random streams.
//!
//! Every Monte Carlo consumer derives its generator from `(seed, stream)`:
//! ChaCha supports 2^64 independent streams per key, so work can be batched
//! and merged in a fixed order without the result depending on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for the given seed and stream.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Combine a caller stream id with a batch index into a single stream id.
pub fn substream(stream_id: u64, batch: u64) -> u64 {
    // Bijective on (u32, u32) pairs; beyond that collisions are astronomically unlikely.
    stream_id.rotate_left(32) ^ batch
}
