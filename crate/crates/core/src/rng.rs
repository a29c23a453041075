//! Counter-based random streams.
//!
//! Every random quantity in a run is drawn from its own ChaCha stream, keyed
//! by the run seed and a tuple of coordinates. Draw order across streams is
//! therefore irrelevant and per-index evaluations may run in any order (or in
//! parallel) while the run stays bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    StopTime = 1,
    Minibatch = 2,
    Refresh = 3,
    /// Draws for ĥ_i at the current state of an inner step.
    Current = 4,
    /// Draws for ĥ_i at the previous state of an inner step.
    Previous = 5,
    Online = 6,
    Diagnostic = 7,
    Data = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream for `(seed, purpose, a, b, c)`.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64, c: u64) -> StreamRng {
    let mut id = splitmix(purpose as u64);
    for x in [a, b, c] {
        id = splitmix(id ^ x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
