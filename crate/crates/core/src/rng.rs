//! Seeded randomness and stable hashing.
//!
//! Every random stream in the crate is a `ChaCha8Rng` derived from a user
//! seed plus a stream label, so results do not depend on the order in which
//! unrelated components draw numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; spreads low-entropy inputs over all 64 bits.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    mix64(seed ^ fnv1a64(stream.as_bytes()))
}

pub fn seeded(seed: u64, stream: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}
