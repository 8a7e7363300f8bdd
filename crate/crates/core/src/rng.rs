//! Counter-based random streams.
//!
//! A stream is a pure function of `(seed, purpose, counter)`, so a consumer
//! never depends on how much randomness another consumer drew before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-separated purposes sharing one user seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    BaseInit = 1,
    GateInit = 2,
    TrainBatches = 3,
    EvalBatches = 4,
    Dropout = 5,
    Sampling = 6,
}

pub fn stream(seed: u64, purpose: Purpose, counter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(counter);
    rng
}
