//! Stable seed derivation. Everything random in a run descends from one base
//! seed through these functions, so results do not depend on the std hasher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the UTF-8 bytes.
pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`, order-sensitive.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

/// Stream tags, so distinct consumers never share a derived seed.
pub mod stream {
    pub const PROBE_INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const PERTURB: u64 = 3;
    pub const FEATURE_NOISE: u64 = 4;
    pub const VERB_ANCHOR: u64 = 5;
    pub const NOUN_ANCHOR: u64 = 6;
}
