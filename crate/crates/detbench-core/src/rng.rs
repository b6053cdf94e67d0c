//! Deterministic seed derivation.
//!
//! Every random draw in the crate flows from a user-supplied root seed through
//! [`derive_rng`], keyed by a domain tag and an index, so that per-item streams
//! are independent of iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags for seed derivation. Values are arbitrary but frozen.
pub mod tags {
    pub const REAL: u64 = 0x01;
    pub const GEN_G1: u64 = 0x11;
    pub const GEN_G2: u64 = 0x12;
    pub const GEN_G3: u64 = 0x13;
    pub const GEN_G4: u64 = 0x14;
    pub const DETECTOR_INIT: u64 = 0x21;
    pub const TRAIN_SHUFFLE: u64 = 0x22;
    pub const ATTACK_INIT: u64 = 0x31;
    pub const SUBSAMPLE: u64 = 0x41;
    pub const RECORD_SEED: u64 = 0x51;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix (seed, tag, index) into a single well-distributed 64-bit value.
pub fn mix64(seed: u64, tag: u64, index: u64) -> u64 {
    let mut state = seed;
    let a = splitmix64(&mut state);
    state ^= tag;
    let b = splitmix64(&mut state);
    state ^= index;
    let c = splitmix64(&mut state);
    a ^ b.rotate_left(21) ^ c.rotate_left(43)
}

/// Deterministic per-(seed, tag, index) generator.
pub fn derive_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut state = mix64(seed, tag, index);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
