//! Seeded random streams. Every stochastic routine derives its generator from
//! an explicit seed, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a child seed from a base seed and a sequence of stream indices.
pub fn derive_seed(base: u64, indices: &[u64]) -> u64 {
    indices.iter().fold(splitmix64(base), |acc, &i| {
        splitmix64(acc ^ splitmix64(i.wrapping_add(0x9E37_79B9_7F4A_7C15)))
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
