//! Fixed-iteration projected-gradient solver for [`MheProblem`] and the
//! active-set reference optimum used to measure the sub-optimality error.
//!
//! Two step rules are provided:
//!
//! * [`StepRule::Lifted`] runs projected gradient on `‖z − z̃‖²_{H_t}` in `z`
//!   coordinates, projecting onto the condensed feasible set
//!   `{Ψv + ψ : v ∈ box}` (an exact strongly convex box-QP). It contracts in
//!   the Euclidean `z` norm with base `1 − λ_min(H_t)/λ_max(H_t)`, which is the
//!   norm the sub-optimality error is measured in.
//! * [`StepRule::Reduced`] runs projected gradient on the free coordinates
//!   with step `1/L`, `L = λ_max(2ΨᵀH_tΨ)`. Its base `1 − μ/L` bounds the
//!   contraction of `v`, not of `z`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::mhe::{CondensedPoint, MheProblem};
use crate::model::BoxSet;
use crate::qp::{kkt_residual, solve_box_qp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    #[default]
    Lifted,
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Contraction {
    pub step: f64,
    /// `q` in `φ(K) = q^K`.
    pub base: f64,
    pub lipschitz: f64,
    pub strong_convexity: f64,
}

pub fn project_box(v: &DVector<f64>, boxes: &BoxSet) -> DVector<f64> {
    boxes.clamp(v)
}

pub fn contraction_rate(problem: &MheProblem, rule: StepRule) -> Result<Contraction> {
    let hessian = match rule {
        StepRule::Lifted => problem.weight.scale(2.0),
        StepRule::Reduced => problem.reduced_hessian(),
    };
    let eig = sym_eigen(&hessian);
    let (mu, lipschitz) = (eig.min(), eig.max());
    if !(mu > 0.0) || !lipschitz.is_finite() {
        return Err(Error::DegenerateHessian { min_eig: mu });
    }
    let base = (1.0 - mu / lipschitz).max(0.0);
    debug_assert!(base < 1.0);
    Ok(Contraction {
        step: 1.0 / lipschitz,
        base,
        lipschitz,
        strong_convexity: mu,
    })
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub z_k: CondensedPoint,
    pub iterations: usize,
    pub step_size: f64,
    pub contraction_base: f64,
    /// `‖z^k − z*‖` for `k = 0..=K` when a reference optimum was supplied.
    pub per_iteration_distances: Option<Vec<f64>>,
    /// Cost after the initial projection and after every iteration.
    pub costs: Vec<f64>,
}

/// Runs exactly `k` projected-gradient iterations from the warm start `z0`.
pub fn solve_fixed_iters(problem: &MheProblem, z0: &DVector<f64>, k: usize, rule: StepRule) -> Result<SolveReport> {
    solve_fixed_iters_traced(problem, z0, k, rule, None)
}

pub fn solve_fixed_iters_traced(
    problem: &MheProblem,
    z0: &DVector<f64>,
    k: usize,
    rule: StepRule,
    reference: Option<&DVector<f64>>,
) -> Result<SolveReport> {
    if z0.len() != problem.dim_z() {
        return Err(Error::dims("warm start z0", problem.dim_z(), z0.len()));
    }
    let rate = contraction_rate(problem, rule)?;
    let mut distances = reference.map(|_| Vec::with_capacity(k + 1));
    let mut costs = Vec::with_capacity(k + 1);
    let record = |z: &DVector<f64>, distances: &mut Option<Vec<f64>>, costs: &mut Vec<f64>| {
        if let (Some(d), Some(zs)) = (distances.as_mut(), reference) {
            d.push((z - zs).norm());
        }
        costs.push(problem.cost_z(z));
    };

    let v = match rule {
        StepRule::Reduced => {
            let mut v = project_box(&problem.free_from_z(z0)?, &problem.boxes);
            record(&problem.lift_point(&v).z, &mut distances, &mut costs);
            for it in 0..k {
                let grad = problem.gradient_v(&v);
                v = project_box(&(&v - grad.scale(rate.step)), &problem.boxes);
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonfiniteIterate { iteration: it + 1 });
                }
                record(&problem.lift_point(&v).z, &mut distances, &mut costs);
            }
            v
        }
        StepRule::Lifted => {
            let projector = Projector::new(problem);
            let mut v = projector.project(z0, None)?;
            let mut z = problem.lift_point(&v).z;
            record(&z, &mut distances, &mut costs);
            for it in 0..k {
                let grad = (&problem.weight * (&z - &problem.reference)).scale(2.0);
                let trial = &z - grad.scale(rate.step);
                v = projector.project(&trial, Some(&v))?;
                z = problem.lift_point(&v).z;
                if z.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonfiniteIterate { iteration: it + 1 });
                }
                record(&z, &mut distances, &mut costs);
            }
            v
        }
    };

    Ok(SolveReport {
        z_k: problem.lift_point(&v),
        iterations: k,
        step_size: rate.step,
        contraction_base: rate.base,
        per_iteration_distances: distances,
        costs,
    })
}

/// Euclidean projection onto `{Ψv + ψ : v ∈ box}`, returned in free
/// coordinates.
struct Projector<'a> {
    problem: &'a MheProblem,
    gram: DMatrix<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl<'a> Projector<'a> {
    fn new(problem: &'a MheProblem) -> Self {
        Projector {
            problem,
            gram: (problem.lift.transpose() * &problem.lift).scale(2.0),
            lo: problem.boxes.lower(),
            hi: problem.boxes.upper(),
        }
    }

    fn project(&self, y: &DVector<f64>, warm: Option<&DVector<f64>>) -> Result<DVector<f64>> {
        let c = (self.problem.lift.transpose() * (&self.problem.offset - y)).scale(2.0);
        let start = match warm {
            Some(v) => v.clone(),
            None => self.problem.free_from_z(y)?,
        };
        let max_cycles = 20 * self.lo.len() + 50;
        Ok(solve_box_qp(&self.gram, &c, &self.lo, &self.hi, Some(&start), max_cycles)?.x)
    }
}

/// Reference optimum by the active-set method; fails unless the KKT residual
/// reaches `tol`.
pub fn solve_oracle(problem: &MheProblem, tol: f64) -> Result<CondensedPoint> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter {
            name: "tol".into(),
            reason: "oracle tolerance must be positive".into(),
        });
    }
    let g = problem.reduced_hessian();
    let c = problem.reduced_linear();
    let lo = problem.boxes.lower();
    let hi = problem.boxes.upper();
    let max_cycles = 20 * c.len() + 50;
    let sol = solve_box_qp(&g, &c, &lo, &hi, None, max_cycles)?;
    let residual = kkt_residual(&g, &c, &lo, &hi, &sol.x);
    if residual > tol {
        return Err(Error::MaxCyclesExceeded {
            cycles: sol.cycles,
            residual,
        });
    }
    Ok(problem.lift_point(&sol.x))
}

/// KKT residual of a free-coordinate point for the problem's reduced QP.
pub fn oracle_residual(problem: &MheProblem, v: &DVector<f64>) -> f64 {
    kkt_residual(
        &problem.reduced_hessian(),
        &problem.reduced_linear(),
        &problem.boxes.lower(),
        &problem.boxes.upper(),
        v,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mhe::build_problem;
    use crate::model::{Interval, IossCertificate, LtiSystem};

    fn small_problem() -> MheProblem {
        let mut sys = LtiSystem::unconstrained(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
        );
        sys.w1_box = BoxSet::uniform(2, Interval::symmetric(0.1));
        sys.w2_box = BoxSet::uniform(1, Interval::symmetric(0.1));
        let cert = IossCertificate::new(DMatrix::identity(2, 2) * 0.3, DMatrix::identity(3, 3), DMatrix::identity(1, 1), 0.7, 1e-8).unwrap();
        let u: Vec<_> = (0..3).map(|i| DVector::from_element(1, 0.1 * i as f64)).collect();
        let y: Vec<_> = (0..3).map(|i| DVector::from_element(1, 1.0 - 0.4 * i as f64)).collect();
        build_problem(&sys, &cert, &DVector::from_vec(vec![1.0, -1.0]), &u, &y, 3, 3).unwrap()
    }

    #[test]
    fn project_box_examples() {
        let b = BoxSet(vec![Interval::symmetric(0.1)]);
        assert_eq!(project_box(&DVector::from_element(1, 0.3), &b)[0], 0.1);
        assert_eq!(project_box(&DVector::from_element(1, 0.05), &b)[0], 0.05);
        let v = DVector::from_element(1, 1e9);
        assert_eq!(project_box(&v, &BoxSet::unbounded(1)), v);
    }

    #[test]
    fn contraction_perfectly_conditioned() {
        let sys = LtiSystem::unconstrained(DMatrix::identity(1, 1), DMatrix::zeros(1, 1), DMatrix::identity(1, 1));
        let cert = IossCertificate::new(DMatrix::identity(1, 1) * 0.5, DMatrix::identity(2, 2), DMatrix::identity(1, 1), 0.5, 1e-8).unwrap();
        let p = build_problem(&sys, &cert, &DVector::zeros(1), &[], &[], 3, 0).unwrap();
        // H = 2P = I, Ψ = I.
        for rule in [StepRule::Lifted, StepRule::Reduced] {
            let c = contraction_rate(&p, rule).unwrap();
            assert_eq!(c.step, 0.5);
            assert_eq!(c.base, 0.0);
        }
    }

    #[test]
    fn contraction_from_reduced_hessian_diag_1_4() {
        let sys = LtiSystem::unconstrained(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), DMatrix::zeros(1, 2));
        let p_mat = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 1.0]));
        let cert = IossCertificate::new(p_mat, DMatrix::identity(3, 3), DMatrix::identity(1, 1), 0.5, 1e-8).unwrap();
        let p = build_problem(&sys, &cert, &DVector::zeros(2), &[], &[], 3, 0).unwrap();
        assert_eq!(p.reduced_hessian(), DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])));
        assert!((contraction_rate(&p, StepRule::Reduced).unwrap().base - 0.75).abs() < 1e-15);
    }

    #[test]
    fn optimum_is_fixed_point() {
        let p = small_problem();
        let star = solve_oracle(&p, 1e-10).unwrap();
        for rule in [StepRule::Lifted, StepRule::Reduced] {
            let rep = solve_fixed_iters(&p, &star.z, 25, rule).unwrap();
            assert!((rep.z_k.z - &star.z).amax() < 1e-12, "{rule:?}");
        }
    }

    #[test]
    fn zero_iterations_return_projection() {
        let p = small_problem();
        let mut z0 = DVector::zeros(p.dim_z());
        z0[2] = 5.0; // ŵ¹ entry, outside ±0.1
        let rep = solve_fixed_iters(&p, &z0, 0, StepRule::Reduced).unwrap();
        assert_eq!(rep.z_k.v.as_ref().unwrap()[2], 0.1);
        let rep = solve_fixed_iters(&p, &z0, 0, StepRule::Lifted).unwrap();
        assert!(p.boxes.contains(rep.z_k.v.as_ref().unwrap()));
    }

    #[test]
    fn costs_nonincreasing_and_feasible() {
        let p = small_problem();
        let z0 = DVector::from_element(p.dim_z(), 0.7);
        for rule in [StepRule::Lifted, StepRule::Reduced] {
            let rep = solve_fixed_iters(&p, &z0, 40, rule).unwrap();
            for w in rep.costs.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-14, "{rule:?}: {} > {}", w[1], w[0]);
            }
            assert!(p.boxes.contains(rep.z_k.v.as_ref().unwrap()));
        }
    }

    #[test]
    fn oracle_rejects_nonpositive_tol() {
        assert!(solve_oracle(&small_problem(), 0.0).is_err());
    }
}
