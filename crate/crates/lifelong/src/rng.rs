//! Deterministic random streams.
//!
//! All randomness in the crate flows from a single `u64` seed. Independent
//! consumers (data generation, weight init, sampling, per-column k-means)
//! get their own named stream so that changing how one consumer draws does
//! not perturb the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a reproducible RNG for `name` from the run seed.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut state = seed ^ fnv1a(name.as_bytes());
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        state = splitmix64(&mut state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
