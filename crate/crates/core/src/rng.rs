//! Seeded randomness and seed derivation.

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of words into a child seed. Distinct paths give
/// independent streams.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Stream labels for [`derive`], so call sites do not collide.
pub mod stream {
    pub const SHUFFLE: u64 = 1;
    pub const GRADIENT_NOISE: u64 = 2;
    pub const LABEL_NOISE: u64 = 3;
    pub const EXTENSION: u64 = 4;
    pub const BOTTOM_INIT: u64 = 5;
    pub const TOP_INIT: u64 = 6;
    pub const SURROGATE_INIT: u64 = 7;
    pub const DUMMY_LABELS: u64 = 8;
    pub const SPLIT: u64 = 9;
    pub const LEAK: u64 = 10;
    pub const SECRET_COLUMN: u64 = 11;
    pub const SYNTH: u64 = 12;
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Laplace(0, b) by inverse CDF.
pub fn laplace(rng: &mut impl Rng, b: f64) -> f64 {
    // u in (-0.5, 0.5), so the log argument is in (0, 1].
    let u: f64 = rng.sample::<f64, _>(Open01) - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}
