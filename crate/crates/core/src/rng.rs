//! Deterministic random streams derived from a master seed.
//!
//! Every consumer of randomness (initialization, batch sampling, noise,
//! dropout, evaluation rollouts) gets its own ChaCha stream so toggling one
//! component never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Sampler = 2,
    Noise = 3,
    Dropout = 4,
    Eval = 5,
    DataGen = 6,
    Reference = 7,
    Oracle = 8,
}

/// Stream `kind` for `seed`, further split by `index` (episode, trajectory, ...).
pub fn stream(seed: u64, kind: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 48) ^ index);
    rng
}
