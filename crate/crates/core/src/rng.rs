//! Named random substreams derived from one run seed.
//!
//! Every consumer gets its own ChaCha stream so that, for example, changing the
//! calibration sample count never perturbs training batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Pretrain = 2,
    Train = 3,
    Calibration = 4,
    Volume = 5,
    Rollout = 6,
}

/// The generator for `stream` under `seed`.
pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// A generator positioned at a per-iteration offset of `stream`. Batches drawn
/// this way depend only on `(seed, iter)`, so resumed runs see the same data.
pub fn iteration(seed: u64, s: Stream, iter: usize) -> ChaCha8Rng {
    let mut rng = stream(seed, s);
    rng.set_word_pos((iter as u128) << 40);
    rng
}
