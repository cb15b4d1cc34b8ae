//! Named, seeded random substreams.
//!
//! Every consumer of randomness asks for a stream by `(seed, name, index)`.
//! Streams are independent ChaCha8 generators, so adding draws to one stream
//! never shifts the values another stream produces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::textembed::fnv1a64;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed, a stream name and a list of indices into one 64-bit seed.
pub fn derive_seed(seed: u64, name: &str, indices: &[u64]) -> u64 {
    let mut state = splitmix64(seed ^ fnv1a64(name.as_bytes()));
    for &i in indices {
        state = splitmix64(state ^ splitmix64(i));
    }
    state
}

pub fn stream(seed: u64, name: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, indices))
}
