//! Primal active-set method for strictly convex box-constrained QPs
//! `min ½ vᵀGv + cᵀv  s.t.  lo ≤ v ≤ hi`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
pub struct BoxQpSolution {
    pub x: DVector<f64>,
    pub cycles: usize,
    pub kkt_residual: f64,
}

/// `‖v − clamp(v − (Gv + c))‖∞`, zero exactly at the KKT point.
pub fn kkt_residual(g: &DMatrix<f64>, c: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let grad = g * v + c;
    (0..v.len())
        .map(|i| (v[i] - (v[i] - grad[i]).max(lo[i]).min(hi[i])).abs())
        .fold(0.0, f64::max)
}

/// Solves the QP from a (clamped) starting point. Blocking bounds are added
/// nearest-first and released most-violated-multiplier-first; ties go to the
/// lowest index.
pub fn solve_box_qp(
    g: &DMatrix<f64>,
    c: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    start: Option<&DVector<f64>>,
    max_cycles: usize,
) -> Result<BoxQpSolution> {
    let n = c.len();
    let mut x = match start {
        Some(s) => DVector::from_iterator(n, (0..n).map(|i| s[i].max(lo[i]).min(hi[i]))),
        None => DVector::from_iterator(n, (0..n).map(|i| 0.0f64.max(lo[i]).min(hi[i]))),
    };
    let mut set: Vec<Bound> = (0..n)
        .map(|i| {
            if x[i] == lo[i] && lo[i].is_finite() {
                Bound::Lower
            } else if x[i] == hi[i] && hi[i].is_finite() {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();

    let scale = g.amax().max(c.amax()).max(1.0);
    for cycle in 0..max_cycles {
        let free: Vec<usize> = (0..n).filter(|&i| set[i] == Bound::Free).collect();
        let target = free_minimizer(g, c, &x, &free)?;

        let mut alpha = 1.0;
        let mut blocking: Option<(usize, Bound)> = None;
        for (k, &i) in free.iter().enumerate() {
            let p = target[k] - x[i];
            let (limit, side) = if p < 0.0 {
                ((lo[i] - x[i]) / p, Bound::Lower)
            } else if p > 0.0 {
                ((hi[i] - x[i]) / p, Bound::Upper)
            } else {
                continue;
            };
            if limit < alpha {
                alpha = limit.max(0.0);
                blocking = Some((i, side));
            }
        }

        for (k, &i) in free.iter().enumerate() {
            x[i] += alpha * (target[k] - x[i]);
        }

        if let Some((i, side)) = blocking {
            x[i] = if side == Bound::Lower { lo[i] } else { hi[i] };
            set[i] = side;
            continue;
        }

        // Free block optimal: check multipliers of the bounds held.
        let grad = g * &x + c;
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..n {
            let mult = match set[i] {
                Bound::Free => continue,
                Bound::Lower => grad[i],
                Bound::Upper => -grad[i],
            };
            if mult < -1e-13 * scale && worst.is_none_or(|(_, w)| mult < w) {
                worst = Some((i, mult));
            }
        }
        match worst {
            Some((i, _)) => set[i] = Bound::Free,
            None => {
                let kkt_residual = kkt_residual(g, c, lo, hi, &x);
                return Ok(BoxQpSolution {
                    x,
                    cycles: cycle + 1,
                    kkt_residual,
                });
            }
        }
    }
    Err(Error::MaxCyclesExceeded {
        cycles: max_cycles,
        residual: kkt_residual(g, c, lo, hi, &x),
    })
}

// Minimizer over the free coordinates with the others held at `x`, with one
// step of iterative refinement.
fn free_minimizer(g: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>, free: &[usize]) -> Result<Vec<f64>> {
    let nf = free.len();
    if nf == 0 {
        return Ok(Vec::new());
    }
    let gff = DMatrix::from_fn(nf, nf, |a, b| g[(free[a], free[b])]);
    let chol = gff.clone().cholesky().ok_or(Error::DegenerateHessian { min_eig: f64::NAN })?;

    let mut fixed = x.clone();
    for &i in free {
        fixed[i] = 0.0;
    }
    let gx_fixed = g * &fixed;
    let rhs = DVector::from_iterator(nf, free.iter().map(|&i| -(c[i] + gx_fixed[i])));
    let mut sol = chol.solve(&rhs);
    let resid = &rhs - &gff * &sol;
    sol += chol.solve(&resid);
    Ok(sol.iter().copied().collect())
}
