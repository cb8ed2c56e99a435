//! Deterministic, independently seeded random streams.
//!
//! Every consumer of randomness (a party's noise, a party's shares, the
//! subsample for one batch) gets its own ChaCha stream derived from the run
//! seed and a tuple of stream coordinates, so results do not depend on the
//! order in which streams are drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes, mixed into the seed so that e.g. the noise and the
/// share streams of the same party never coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Split = 2,
    KeyNoise = 3,
    Subsample = 4,
    Shuffle = 5,
    PartyDropout = 6,
    DpNoise = 7,
    Shares = 8,
    Misc = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream `(seed, purpose, coords...)`.
pub fn derive_seed(seed: u64, purpose: Purpose, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ (purpose as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, coords: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, purpose, coords))
}
