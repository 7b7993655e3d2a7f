//! Seed derivation for independent, reproducible random streams.
//!
//! Every particle, bridge, and resampling step draws from its own ChaCha
//! stream keyed by a base seed and a tuple of integer tags, so results do not
//! depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with tags into a new 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut state = seed;
    let mut out = splitmix64(&mut state);
    for &tag in tags {
        state ^= tag.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        out ^= splitmix64(&mut state);
        state = out;
    }
    out
}

/// A generator for the stream identified by `(seed, tags)`.
pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    let mut key = [0u8; 32];
    let mut state = derive_seed(seed, tags);
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream tags used across the crate.
pub mod tag {
    pub const TRUTH: u64 = 1;
    pub const OBSERVATION: u64 = 2;
    pub const INIT: u64 = 3;
    pub const PREDICT: u64 = 4;
    pub const RESAMPLE: u64 = 5;
    pub const ENKF: u64 = 6;
    pub const BRIDGE: u64 = 7;
    pub const PRECISION: u64 = 8;
}
