//! Counter-based seed derivation.
//!
//! Every random stream in the library is addressed by `(master seed, label, index)`.
//! The label is folded into the seed with FNV-1a and the result is mixed with
//! SplitMix64, so streams never depend on how many draws another stream consumed.
//! Matrix rows and Monte Carlo columns are separate ChaCha streams of one key.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Child seed for `(seed, label, index)`.
pub fn derive(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(label)).wrapping_add(splitmix64(index.wrapping_add(1))))
}

/// ChaCha stream `stream` of the key derived from `(seed, label)`.
pub fn stream_rng(seed: u64, label: &str, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, label, 0));
    rng.set_stream(stream);
    rng
}
