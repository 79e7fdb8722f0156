//! Seed derivation. Every random stream in the crate comes from a ChaCha
//! generator keyed by a seed mixed from a base seed and a stream label, so
//! results do not depend on the order in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a numeric stream index.
pub fn derive(base: u64, stream: u64) -> u64 {
    splitmix(splitmix(base) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Mixes a base seed with a textual label.
pub fn derive_str(base: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    derive(base, h)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
