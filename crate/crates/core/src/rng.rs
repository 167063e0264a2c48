//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by a
//! single 64-bit seed. Independent consumers (the dataset of a run, the i-th
//! instance of a verification batch) are separated by the ChaCha stream id, so
//! a stream's contents depend only on `(seed, stream)` and never on the order
//! in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream id used by [`crate::problem::random_dataset`].
pub const DATASET_STREAM: u64 = 0;

/// Stream id of the `index`-th instance of a seeded batch.
pub fn instance_stream(index: u64) -> u64 {
    index + 1
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
