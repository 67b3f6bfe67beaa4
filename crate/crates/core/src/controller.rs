//! Saturated linear state feedback `u = clamp(−K x̂, u_box)` and sample-based
//! estimates of its Lipschitz constant and of the closed-loop gain from
//! estimation error to state.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::spectral_norm;
use crate::model::{BoxSet, LtiSystem};
use crate::sampling::{require_bounded, seeded, uniform_in_box, unit_direction};

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw {
    /// `n_u × n_x`.
    pub gain: DMatrix<f64>,
    pub u_box: BoxSet,
    pub declared_lipschitz: Option<f64>,
}

impl FeedbackLaw {
    pub fn new(gain: DMatrix<f64>, u_box: BoxSet) -> Result<Self> {
        if u_box.dim() != gain.nrows() {
            return Err(Error::dims("u_box", gain.nrows(), u_box.dim()));
        }
        Ok(FeedbackLaw {
            gain,
            u_box,
            declared_lipschitz: None,
        })
    }

    pub fn nx(&self) -> usize {
        self.gain.ncols()
    }
}

pub fn evaluate(law: &FeedbackLaw, x_hat: &DVector<f64>) -> Result<DVector<f64>> {
    if x_hat.len() != law.nx() {
        return Err(Error::dims("controller input", law.nx(), x_hat.len()));
    }
    Ok(law.u_box.clamp(&-(&law.gain * x_hat)))
}

/// LQR gain from the discrete algebraic Riccati equation, by fixed-point
/// iteration of the Riccati recursion.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    for _ in 0..100_000 {
        let bt_p = b.transpose() * &p;
        let s = r + &bt_p * b;
        let k = s.lu().solve(&(&bt_p * a)).ok_or(Error::InvalidParameter {
            name: "lqr".into(),
            reason: "R + BᵀPB is singular".into(),
        })?;
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        let next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|v| v.is_finite()) {
            break;
        }
        let delta = (&next - &p).amax();
        p = next;
        if delta <= 1e-13 * p.amax().max(1.0) {
            let bt_p = b.transpose() * &p;
            return (r + &bt_p * b).lu().solve(&(&bt_p * a)).ok_or(Error::InvalidParameter {
                name: "lqr".into(),
                reason: "R + BᵀPB is singular".into(),
            });
        }
    }
    Err(Error::InvalidParameter {
        name: "lqr".into(),
        reason: "Riccati iteration did not converge (is (A, B) stabilizable?)".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub sampled: f64,
    /// Largest singular value of the gain; saturation is 1-Lipschitz, so
    /// this bounds the law globally.
    pub analytic: f64,
    pub value: f64,
}

/// Max of sampled pair ratios `‖π(x) − π(x')‖/‖x − x'‖` over `domain` and
/// the analytic bound `‖K‖`.
pub fn estimate_lipschitz(law: &FeedbackLaw, domain: &BoxSet, n_samples: usize, seed: u64) -> Result<LipschitzEstimate> {
    if n_samples < 2 {
        return Err(Error::InvalidParameter {
            name: "n_samples".into(),
            reason: "at least two samples are needed".into(),
        });
    }
    if domain.dim() != law.nx() {
        return Err(Error::dims("Lipschitz sampling domain", law.nx(), domain.dim()));
    }
    require_bounded(domain, "controller domain")?;
    let mut rng = seeded(seed);
    let mut sampled: f64 = 0.0;
    for _ in 0..n_samples {
        let x = uniform_in_box(&mut rng, domain);
        let x2 = uniform_in_box(&mut rng, domain);
        let dx = (&x - &x2).norm();
        if dx <= f64::EPSILON {
            continue;
        }
        let du = (evaluate(law, &x)? - evaluate(law, &x2)?).norm();
        sampled = sampled.max(du / dx);
    }
    let analytic = spectral_norm(&law.gain);
    Ok(LipschitzEstimate {
        sampled,
        analytic,
        value: sampled.max(analytic),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainEstimate {
    pub slope: f64,
    pub heuristic: bool,
}

/// Divergence threshold on `‖x_t‖` for the closed-loop simulations.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

/// Heuristic slope of `γ₁,₃`: drives `x⁺ = Ax + Bπ(x + e)` from `x₀ = 0`
/// with `w = 0` and injected errors of constant magnitude `m` in random
/// directions, and takes the largest `sup_t ‖x_t‖ / m`, i.e. the tightest
/// line through the origin above every tested point.
pub fn estimate_closed_loop_gain(sys: &LtiSystem, law: &FeedbackLaw, horizon: usize, e_magnitudes: &[f64], seed: u64) -> Result<GainEstimate> {
    let nx = sys.nx();
    if law.nx() != nx || law.gain.nrows() != sys.nu() {
        return Err(Error::dims("feedback gain", format!("{}x{}", sys.nu(), nx), format!("{}x{}", law.gain.nrows(), law.nx())));
    }
    let mut rng = seeded(seed);
    let trials = 8;
    let mut slope: f64 = 0.0;
    for &m in e_magnitudes.iter().filter(|m| **m > 0.0) {
        for _ in 0..trials {
            let mut x = DVector::zeros(nx);
            let mut sup: f64 = 0.0;
            for step in 0..horizon {
                let e = unit_direction(&mut rng, nx) * m;
                let u = evaluate(law, &(&x + e))?;
                x = &sys.a * &x + &sys.b * u;
                let norm = x.norm();
                if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
                    return Err(Error::DivergentTrajectory { step: step + 1, norm });
                }
                sup = sup.max(norm);
            }
            slope = slope.max(sup / m);
        }
    }
    Ok(GainEstimate { slope, heuristic: true })
}

/// Smoke test of closed-loop stability under exact state feedback: from
/// random `x₀` in `[−radius, radius]ⁿ`, `‖x_t‖` must drop below `threshold`
/// within `horizon` steps.
pub fn stability_smoke_test(sys: &LtiSystem, law: &FeedbackLaw, radius: f64, horizon: usize, trials: usize, seed: u64, threshold: f64) -> Result<()> {
    let mut rng = seeded(seed);
    let nx = sys.nx();
    for trial in 0..trials {
        let mut x = crate::sampling::uniform_cube(&mut rng, nx, radius);
        let mut settled = x.norm() < threshold;
        for _ in 0..horizon {
            if settled {
                break;
            }
            x = &sys.a * &x + &sys.b * evaluate(law, &x)?;
            if !x.norm().is_finite() || x.norm() > DIVERGENCE_LIMIT {
                break;
            }
            settled = x.norm() < threshold;
        }
        if !settled {
            return Err(Error::StabilityAssumptionViolated {
                reason: format!("trial {trial}: ‖x‖ = {:e} after {horizon} steps from radius {radius}", x.norm()),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Interval;
    use approx::assert_relative_eq;

    fn scalar_law(k: f64, bound: f64) -> FeedbackLaw {
        FeedbackLaw::new(DMatrix::from_element(1, 1, k), BoxSet(vec![Interval::symmetric(bound)])).unwrap()
    }

    #[test]
    fn evaluate_examples() {
        let law = scalar_law(1.0, 1.0);
        assert_eq!(evaluate(&law, &DVector::zeros(1)).unwrap()[0], 0.0);
        assert_eq!(evaluate(&law, &DVector::from_element(1, 5.0)).unwrap()[0], -1.0);
        assert_eq!(evaluate(&law, &DVector::from_element(1, 0.25)).unwrap()[0], -0.25);
        assert!(evaluate(&law, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn lipschitz_scalar_linear_region() {
        let law = scalar_law(3.0, 100.0);
        let est = estimate_lipschitz(&law, &BoxSet(vec![Interval::symmetric(1.0)]), 50, 7).unwrap();
        assert_relative_eq!(est.sampled, 3.0, epsilon = 1e-6);
        assert_relative_eq!(est.value, 3.0, epsilon = 1e-6);
    }

    #[test]
    fn lipschitz_zero_gain() {
        let law = FeedbackLaw::new(DMatrix::zeros(2, 3), BoxSet::unbounded(2)).unwrap();
        let est = estimate_lipschitz(&law, &BoxSet::uniform(3, Interval::symmetric(2.0)), 20, 1).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn lipschitz_analytic_bound_is_largest_singular_value() {
        // diag(2.65, 1) has σ_max 2.65.
        let gain = DMatrix::from_diagonal(&DVector::from_vec(vec![2.65, 1.0]));
        let law = FeedbackLaw::new(gain, BoxSet::uniform(2, Interval::symmetric(1.0))).unwrap();
        let est = estimate_lipschitz(&law, &BoxSet::uniform(2, Interval::symmetric(5.0)), 500, 3).unwrap();
        assert_relative_eq!(est.analytic, 2.65, epsilon = 1e-12);
        assert!(est.sampled <= 2.65 + 1e-12);
    }

    #[test]
    fn lipschitz_rejects_unbounded_domain_and_few_samples() {
        let law = scalar_law(1.0, 1.0);
        assert!(matches!(estimate_lipschitz(&law, &BoxSet::unbounded(1), 10, 0), Err(Error::UnboundedSampleBox { .. })));
        assert!(estimate_lipschitz(&law, &BoxSet(vec![Interval::symmetric(1.0)]), 1, 0).is_err());
    }

    #[test]
    fn lqr_scalar_matches_closed_form() {
        // a = b = q = r = 1: p² − p − 1 = 0, k = p/(1 + p) = 1/golden ratio.
        let one = DMatrix::from_element(1, 1, 1.0);
        let k = lqr_gain(&one, &one, &one, &one).unwrap();
        let p = (1.0 + 5f64.sqrt()) / 2.0;
        assert_relative_eq!(k[(0, 0)], p / (1.0 + p), epsilon = 1e-12);
    }

    #[test]
    fn gain_scales_with_magnitude_in_linear_region() {
        let sys = LtiSystem::unconstrained(DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0));
        let law = scalar_law(0.2, 100.0);
        let g1 = estimate_closed_loop_gain(&sys, &law, 50, &[0.1], 5).unwrap();
        let g2 = estimate_closed_loop_gain(&sys, &law, 50, &[0.2], 5).unwrap();
        assert!(g1.heuristic);
        assert_relative_eq!(g1.slope, g2.slope, epsilon = 1e-12);
        // |x| ≤ 0.2 m Σ 0.3^k = m · 0.2/0.7.
        assert!(g1.slope <= 0.2 / 0.7 + 1e-12);
        assert_eq!(estimate_closed_loop_gain(&sys, &law, 50, &[0.0], 5).unwrap().slope, 0.0);
    }

    #[test]
    fn unstable_loop_detected() {
        let sys = LtiSystem::unconstrained(DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0));
        let law = scalar_law(0.0, 1.0);
        let pushing = scalar_law(-1.0, 1.0);
        assert!(matches!(estimate_closed_loop_gain(&sys, &pushing, 200, &[1.0], 0), Err(Error::DivergentTrajectory { .. })));
        assert!(matches!(stability_smoke_test(&sys, &law, 1.0, 50, 4, 0, 1e-6), Err(Error::StabilityAssumptionViolated { .. })));
        let good = scalar_law(1.5, 100.0);
        stability_smoke_test(&sys, &good, 1.0, 100, 4, 0, 1e-6).unwrap();
    }
}
