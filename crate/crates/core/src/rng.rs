//! Keyed seed derivation.
//!
//! Every random stream in the pipeline is derived from one root seed plus a
//! string tag and a tuple of integer counters, so results never depend on
//! the order in which parallel workers draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a root seed, a tag and a counter tuple into a child seed.
pub fn derive_seed(root: u64, tag: &str, counters: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut state = splitmix64(root ^ h);
    for &c in counters {
        state = splitmix64(state ^ splitmix64(c.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    state
}

/// A fresh generator for the keyed stream `(root, tag, counters)`.
pub fn keyed_rng(root: u64, tag: &str, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag, counters))
}

/// Stable 64-bit hash of a string, used to key streams by ids.
pub fn hash_str(s: &str) -> u64 {
    derive_seed(0, s, &[])
}
