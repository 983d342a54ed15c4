//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by the experiment seed and
//! addressed by a stream id (the replication index). ChaCha is counter based,
//! so stream `r` yields the same values no matter which thread draws it or in
//! which order replications are scheduled.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A seeded substream.
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Uniform draw in the open interval (0, 1) with 53 bits of resolution.
#[inline]
pub fn open_unit<R: RngCore>(rng: &mut R) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    ((rng.next_u64() >> 11) as f64 + 0.5) * SCALE
}
