//! Seeded random-number generation.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`), a
//! counter-based stream cipher generator whose output is fully specified and
//! identical on every platform. Independent per-item streams (one per
//! patient, one per request) are derived from a single seed by selecting the
//! ChaCha stream number rather than by reseeding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SurvRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SurvRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for stream `stream` under `seed`; streams never overlap.
pub fn stream(seed: u64, stream: u64) -> SurvRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal(rng: &mut SurvRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn standard_normals(rng: &mut SurvRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}
