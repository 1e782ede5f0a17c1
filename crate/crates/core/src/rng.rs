//! Seeded random streams. Every stochastic component draws from a
//! `ChaCha8Rng` derived from the run seed, so runs replay bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for a (seed, purpose, index) triple.
pub fn derived(seed: u64, stream: u64, index: u64) -> Rng {
    seeded(splitmix64(seed ^ splitmix64(stream ^ splitmix64(index))))
}
