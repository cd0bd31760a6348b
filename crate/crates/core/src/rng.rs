//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! the run seed and a fixed stream id, so adding draws in one place never
//! shifts the numbers seen elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const INIT: u64 = 1;
    pub const SYNTH: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const FINETUNE: u64 = 4;
    pub const AGGREGATOR: u64 = 5;
    pub const WITNESS: u64 = 6;
    pub const SUBBAG: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const END2END: u64 = 9;
}

/// A generator for `(seed, stream)`.
pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// A generator for `(seed, stream)` further split by an index such as an
/// epoch or refresh round.
pub fn seeded_indexed(seed: u64, stream: u64, index: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(stream);
    r
}
