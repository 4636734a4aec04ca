//! Named random sub-streams derived from one root seed.
//!
//! Each source of randomness draws from its own ChaCha stream, so changing
//! e.g. the perturbation noise never shifts the data or the initial weights.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Batches = 3,
    Init = 4,
    PerturbStudent = 5,
    PerturbTeacher = 6,
    /// Random instances of the gradient-check suite.
    Check = 7,
}

/// A 64-bit seed for item `index` of `stream` under `root`.
pub fn sub_seed(root: u64, stream: Stream, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream as u64);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

pub fn stream_rng(root: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(root, stream, index))
}
