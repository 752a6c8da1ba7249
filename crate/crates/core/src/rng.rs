//! Seeded random streams. Every random draw in the crate goes through here so
//! runs are reproducible from a single experiment seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StdRng = ChaCha8Rng;

/// Independent generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> StdRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Normal draw truncated to ±2 standard deviations.
pub fn trunc_normal(rng: &mut StdRng, std: f64) -> f64 {
    loop {
        let x: f64 = rng.sample(StandardNormal);
        if x.abs() <= 2.0 {
            return x * std;
        }
    }
}

pub fn uniform(rng: &mut StdRng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Named stream identifiers.
pub mod streams {
    pub const BACKBONE: u64 = 1;
    pub const PROMPTS: u64 = 2;
    pub const INJECTION: u64 = 3;
    pub const HEADS: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const DATA: u64 = 7;
}
