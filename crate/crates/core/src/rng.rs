//! Named, reproducible random streams.
//!
//! Every random draw in the crate comes from a SplitMix64 generator whose
//! state is derived from `(seed, stream name, indices...)`. Streams with
//! different names or indices are statistically independent, and a given
//! stream never depends on how many draws another stream made.

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

pub type StreamRng = SplitMix64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xCBF2_9CE4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// State word for the stream `name[ids...]` under `seed`.
pub fn derive_seed(seed: u64, name: &str, ids: &[u64]) -> u64 {
    let mut s = mix(seed.wrapping_add(GOLDEN) ^ fnv1a(name.as_bytes()));
    for &id in ids {
        s = mix(s.wrapping_add(GOLDEN) ^ id);
    }
    s
}

pub fn stream(seed: u64, name: &str, ids: &[u64]) -> StreamRng {
    SplitMix64::seed_from_u64(derive_seed(seed, name, ids))
}
