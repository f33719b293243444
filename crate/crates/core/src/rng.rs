//! Counter-derived random streams.
//!
//! Every stream is keyed by `(master seed, trial, node, purpose)`, so results
//! do not depend on the order in which trials are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Observation = 1,
    Projection = 2,
    RandomWalk = 3,
    TrueParameter = 4,
    Recipe = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_seed(master: u64, trial: u64, node: u64, purpose: Purpose) -> u64 {
    let mut h = splitmix(master);
    h = splitmix(h ^ trial);
    h = splitmix(h ^ node);
    splitmix(h ^ purpose as u64)
}

pub fn stream(master: u64, trial: u64, node: u64, purpose: Purpose) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(stream_seed(master, trial, node, purpose))
}
