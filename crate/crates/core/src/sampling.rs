//! Seeded random sampling shared by the estimators and the harness.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::BoxSet;

/// Recorded in log headers.
pub const PRNG_NAME: &str = "ChaCha8Rng";

pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Errors unless every coordinate of the box is bounded.
pub fn require_bounded(boxes: &BoxSet, which: &str) -> Result<()> {
    match boxes.0.iter().position(|iv| !iv.is_bounded()) {
        Some(index) => Err(Error::UnboundedSampleBox {
            which: which.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

/// Elementwise uniform sample; the box must be bounded.
pub fn uniform_in_box<R: Rng>(rng: &mut R, boxes: &BoxSet) -> DVector<f64> {
    DVector::from_iterator(
        boxes.dim(),
        boxes.0.iter().map(|iv| {
            if iv.lower == iv.upper {
                iv.lower
            } else {
                rng.random_range(iv.lower..=iv.upper)
            }
        }),
    )
}

/// Uniform in the symmetric cube `[−r, r]ⁿ`.
pub fn uniform_cube<R: Rng>(rng: &mut R, n: usize, r: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| if r == 0.0 { 0.0 } else { rng.random_range(-r..=r) })
}

/// A direction with unit Euclidean norm (rejects the all-zero draw).
pub fn unit_direction<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    loop {
        let d = uniform_cube(rng, n, 1.0);
        let norm = d.norm();
        if norm > 1e-3 {
            return d / norm;
        }
    }
}
