//! Seed derivation for independent random streams.
//!
//! Every consumer of randomness (operand pool, priming set, per-epoch data,
//! per-evaluation test sets, initialization) draws from its own ChaCha stream
//! whose seed is a hash of the master seed and a stream label, so changing
//! how much one consumer draws never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Pool,
    Priming,
    FineTuneSet,
    Init,
    Epoch(u64),
    Eval { step: u64, length: u64 },
    Dropout(u64),
    Other(u64),
}

impl Stream {
    fn words(self) -> [u64; 3] {
        match self {
            Stream::Pool => [1, 0, 0],
            Stream::Priming => [2, 0, 0],
            Stream::FineTuneSet => [3, 0, 0],
            Stream::Init => [4, 0, 0],
            Stream::Epoch(e) => [5, e, 0],
            Stream::Eval { step, length } => [6, step, length],
            Stream::Dropout(s) => [7, s, 0],
            Stream::Other(x) => [8, x, 0],
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream) -> u64 {
    stream.words().iter().fold(splitmix64(master), |h, &w| splitmix64(h ^ splitmix64(w)))
}

pub fn stream_rng(master: u64, stream: Stream) -> Rng {
    Rng::seed_from_u64(derive_seed(master, stream))
}
