//! Counter-based random streams.
//!
//! Every random decision draws from a stream keyed by
//! `(seed, purpose, user, day, slot)`, so results do not depend on the order
//! in which users are simulated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Population = 1,
    Popularity = 2,
    Assignment = 3,
    Activity = 4,
    Availability = 5,
    Outcomes = 6,
    Posterior = 7,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the stream coordinates into a 64-bit key.
pub fn stream_key(seed: u64, purpose: Purpose, user: u32, day: u32, slot: u32) -> u64 {
    let mut h = splitmix64(seed);
    for word in [purpose as u64, user as u64, day as u64, slot as u64] {
        h = splitmix64(h ^ word);
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, user: u32, day: u32, slot: u32) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, purpose, user, day, slot))
}
