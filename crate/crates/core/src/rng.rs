//! Seed derivation and the keyed Bernoulli stream used by Dare trimming.
//!
//! Stream-style randomness (corpus generation, sampling, init) goes through
//! `ChaCha8Rng`, seeded deterministically. Dare's drop mask instead uses a
//! stateless counter construction keyed by (seed, tensor name, flat index) so
//! the mask is independent of iteration order and parallel schedule.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derive an independent child seed from a parent seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0xa076_1d64_78bd_642f)))
}

/// Derive an independent child seed from a parent seed and a label.
pub fn derive_seed_named(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(label.as_bytes()))
}

/// Deterministic stream RNG for a (seed, label) pair.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_named(seed, label))
}

/// Uniform value in [0, 1) keyed by (seed, name, flat index). Stateless: the
/// value for one index never depends on how many other indices were drawn.
pub fn keyed_uniform(seed: u64, name: &str, index: u64) -> f32 {
    let key = splitmix64(seed ^ fnv1a64(name.as_bytes()));
    let bits = splitmix64(key ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    // top 24 bits give a uniform f32 in [0, 1)
    ((bits >> 40) as f32) / (1u32 << 24) as f32
}
