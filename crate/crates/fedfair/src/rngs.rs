//! Deterministic RNG stream derivation.
//!
//! Every random draw in an experiment comes from a stream derived from the
//! master seed plus a purpose label, a node id, and an iteration index. A
//! stream is a pure function of those four values, so adding or removing a
//! consumer of one stream never perturbs any other stream, and any
//! (node, iteration) draw can be replayed in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64: stateless 64-bit mixer with good avalanche behavior.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the purpose label, so distinct labels land in distinct streams.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a ChaCha8 stream from (master seed, purpose label, node, iteration).
pub fn stream(master_seed: u64, label: &str, node: u64, iteration: u64) -> ChaCha8Rng {
    let mut state = splitmix64(master_seed ^ label_hash(label));
    state = splitmix64(state ^ node.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    state = splitmix64(state ^ iteration.wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Derives a plain u64 sub-seed, for handing to components that seed themselves.
pub fn subseed(master_seed: u64, label: &str, node: u64) -> u64 {
    let state = splitmix64(master_seed ^ label_hash(label));
    splitmix64(state ^ node.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}
