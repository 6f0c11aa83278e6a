//! Counter-based random streams.
//!
//! Every stochastic consumer derives its generator from `(seed, stream)`, so
//! any step of a run can be replayed without replaying the steps before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids for the independent consumers of the run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init,
    Shuffle(u64),
    Dropout(u64),
    Synthetic,
    Check,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Synthetic => 2,
            Stream::Check => 3,
            Stream::Shuffle(epoch) => (1 << 40) | epoch,
            Stream::Dropout(step) => (2 << 40) | step,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
