//! Named random streams.
//!
//! Every stochastic consumer (`fold`, `kmeans`, `gen`, `split`, ...) draws from
//! its own ChaCha stream keyed by the user seed, the stream name and an index,
//! so adding a consumer never shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FOLD: &str = "fold";
pub const KMEANS: &str = "kmeans";
pub const GEN: &str = "gen";
pub const SPLIT: &str = "split";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ fnv1a(name.as_bytes())));
    rng.set_stream(mix(index.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    rng
}
