//! Seeded random streams.
//!
//! Every stream is a `ChaCha8Rng` from `seed_from_u64`. Uniforms come from
//! `gen::<f64>()` (53-bit, `[0, 1)`); standard normals use the basic
//! Box–Muller cosine branch, `√(−2 ln(1 − u₁)) · cos(2π u₂)`, consuming two
//! uniforms per draw.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::Matrix;

pub type Stream = ChaCha8Rng;

/// Stream tags mixed into the top 16 bits of the base seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train = 1,
    Validation = 2,
    Tuning = 3,
    BenchTrain = 4,
    BenchWeave = 5,
    Init = 6,
    Shuffle = 7,
    Search = 8,
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Base seed of a named split.
pub fn split_seed(seed: u64, split: Split) -> u64 {
    seed ^ ((split as u64) << 48)
}

/// Seed of episode `index` within a split: `base ⊕ index`.
pub fn episode_seed(base: u64, index: u64) -> u64 {
    base ^ index
}

pub fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

pub fn normal(rng: &mut Stream) -> f64 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Uniform on `[-hi, -lo] ∪ [lo, hi]`: one uniform for the sign, one for the magnitude.
pub fn signed_uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    let negative = rng.gen::<f64>() < 0.5;
    let m = uniform(rng, lo, hi);
    if negative {
        -m
    } else {
        m
    }
}

/// Draws `S ξ` with `ξ` standard normal, where `S` is a square-root factor.
pub fn correlated_normal(rng: &mut Stream, factor: &Matrix) -> Vec<f64> {
    let n = factor.rows();
    let xi: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    (0..n)
        .map(|r| factor.row(r).iter().zip(&xi).map(|(a, b)| a * b).sum())
        .collect()
}
