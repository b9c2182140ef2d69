//! Counter-based seed derivation from a single master seed.
//!
//! Every stochastic routine receives an explicit generator. Composite
//! pipelines derive per-stream, per-index seeds from the master seed so that
//! serial and parallel executions draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seed for item `index` of the named stream.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ tag_hash(stream)).wrapping_add(splitmix64(index)))
}

pub fn rng_for(master: u64, stream: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, stream, index))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
