//! Counter-based random streams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream keyed by the
//! run seed and addressed by a `(domain, index)` pair, so a draw never depends
//! on how many numbers some other component consumed before it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Name recorded in configs and manifests.
pub const ALGORITHM: &str = "chacha8";

/// Stream domains. Values are part of the reproducibility contract.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const MASK_PLAN: u64 = 2;
    pub const MLM_CORRUPT: u64 = 3;
    pub const BATCH_ORDER: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const GRAD_CHECK: u64 = 7;
    pub const SPLIT: u64 = 8;
}

pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix(domain, index));
    rng
}

fn mix(domain: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = domain.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal sample via Box-Muller.
pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
