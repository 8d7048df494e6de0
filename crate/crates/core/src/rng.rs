//! Deterministic random streams.
//!
//! Every random decision in the pipeline draws from a generator derived
//! functionally from (base seed, stream tag, indices). No generator is
//! threaded through call sites, so reordering work or resuming a run
//! cannot shift anyone else's stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed, a stream tag, and positional indices into one 64-bit seed.
#[must_use]
pub fn derive_seed(base: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut acc = splitmix64(base ^ fnv1a(tag.as_bytes()));
    for &ix in indices {
        acc = splitmix64(acc ^ ix);
    }
    acc
}

/// Generator for the stream identified by (base, tag, indices).
#[must_use]
pub fn derive_rng(base: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, indices))
}
