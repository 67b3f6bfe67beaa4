//! Condensed moving-horizon estimation problem.
//!
//! The decision vector follows the ordering
//! `z = [x̂_{t−M_t}; ŵ_{t−M_t}; ŷ_{t−M_t}; …; ŵ_{t−1}; ŷ_{t−1}]` with
//! `ŵ = [ŵ¹; ŵ²]`. The dynamics and output equations are eliminated: the
//! free variables are `v = [x̂_{t−M_t}; ŵ_{t−M_t}; …; ŵ_{t−1}]` and
//! `z = Ψ v + ψ`, so every box on `v` is exactly projectable.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{block_diag, spectral_norm, weighted_sq_norm};
use crate::model::{BoxSet, IossCertificate, LtiSystem};

/// Signal dimensions fixing the `z` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
}

impl Dims {
    pub fn of(sys: &LtiSystem) -> Self {
        Dims {
            nx: sys.nx(),
            ny: sys.ny(),
        }
    }

    pub fn nw(&self) -> usize {
        self.nx + self.ny
    }

    /// Length of one window block `[ŵ; ŷ]` in `z`.
    pub fn block(&self) -> usize {
        self.nw() + self.ny
    }

    pub fn dim_z(&self, horizon: usize) -> usize {
        self.nx + horizon * self.block()
    }

    pub fn dim_v(&self, horizon: usize) -> usize {
        self.nx + horizon * self.nw()
    }

    /// Horizon `M_t` of a `z` vector of the given length.
    pub fn horizon_of_z(&self, len: usize) -> Option<usize> {
        let rest = len.checked_sub(self.nx)?;
        (rest % self.block() == 0).then_some(rest / self.block())
    }
}

pub fn effective_horizon(horizon_cap: usize, t: usize) -> usize {
    horizon_cap.min(t)
}

/// A point in `z` coordinates, with the free coordinates it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedPoint {
    pub z: DVector<f64>,
    pub v: Option<DVector<f64>>,
}

impl CondensedPoint {
    pub fn from_z(z: DVector<f64>) -> Self {
        CondensedPoint { z, v: None }
    }
}

/// `H_t = blkdiag(2η^{M_t}P, 2η^{M_t−1}Q, η^{M_t−1}R, …, 2Q, R)`.
pub fn compute_weight(horizon: usize, cert: &IossCertificate) -> DMatrix<f64> {
    let eta = cert.eta;
    let mut blocks = Vec::with_capacity(1 + 2 * horizon);
    blocks.push(cert.p.scale(2.0 * eta.powi(horizon as i32)));
    for i in 0..horizon {
        let decay = eta.powi((horizon - 1 - i) as i32);
        blocks.push(cert.q.scale(2.0 * decay));
        blocks.push(cert.r.scale(decay));
    }
    block_diag(&blocks)
}

#[derive(Debug, Clone)]
pub struct MheProblem {
    pub t: usize,
    /// Effective horizon `M_t = min(M, t)`.
    pub horizon: usize,
    pub dims: Dims,
    pub weight: DMatrix<f64>,
    pub reference: DVector<f64>,
    /// `Ψ`, `dim_z × dim_v`.
    pub lift: DMatrix<f64>,
    /// `ψ`, the contribution of the known inputs.
    pub offset: DVector<f64>,
    /// Feasible box on the free variables.
    pub boxes: BoxSet,
    pub x_prior: DVector<f64>,
    pub u_window: Vec<DVector<f64>>,
    pub y_window: Vec<DVector<f64>>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    x_box: BoxSet,
    y_box: BoxSet,
}

/// Assembles the condensed problem for step `t` from the prior for time
/// `t − M_t` and the input/measurement windows over `[t − M_t, t − 1]`.
pub fn build_problem(
    sys: &LtiSystem,
    cert: &IossCertificate,
    x_prior: &DVector<f64>,
    u_window: &[DVector<f64>],
    y_window: &[DVector<f64>],
    horizon_cap: usize,
    t: usize,
) -> Result<MheProblem> {
    let dims = Dims::of(sys);
    let (nx, ny, nw) = (dims.nx, dims.ny, dims.nw());
    let nu = sys.nu();
    let horizon = effective_horizon(horizon_cap, t);
    if u_window.len() != horizon {
        return Err(Error::WindowLengthMismatch {
            what: "u_window".into(),
            expected: horizon,
            found: u_window.len(),
        });
    }
    if y_window.len() != horizon {
        return Err(Error::WindowLengthMismatch {
            what: "y_window".into(),
            expected: horizon,
            found: y_window.len(),
        });
    }
    if x_prior.len() != nx {
        return Err(Error::dims("x_prior", nx, x_prior.len()));
    }
    if let Some(u) = u_window.iter().find(|u| u.len() != nu) {
        return Err(Error::dims("u_window entry", nu, u.len()));
    }
    if let Some(y) = y_window.iter().find(|y| y.len() != ny) {
        return Err(Error::dims("y_window entry", ny, y.len()));
    }
    if cert.p.nrows() != nx || cert.q.nrows() != nw || cert.r.nrows() != ny {
        return Err(Error::dims("certificate (P, Q, R)", format!("{nx}, {nw}, {ny}"), format!("{}, {}, {}", cert.p.nrows(), cert.q.nrows(), cert.r.nrows())));
    }

    let dim_z = dims.dim_z(horizon);
    let dim_v = dims.dim_v(horizon);
    let mut lift = DMatrix::zeros(dim_z, dim_v);
    let mut offset = DVector::zeros(dim_z);
    let mut reference = DVector::zeros(dim_z);

    // x̂_i = S v + s, propagated forward through the window.
    let mut s_mat = DMatrix::zeros(nx, dim_v);
    s_mat.view_mut((0, 0), (nx, nx)).fill_with_identity();
    let mut s_off = DVector::zeros(nx);

    lift.view_mut((0, 0), (nx, nx)).fill_with_identity();
    reference.rows_mut(0, nx).copy_from(x_prior);

    for i in 0..horizon {
        let zw = nx + i * dims.block();
        let zy = zw + nw;
        let vw = nx + i * nw;
        // ŵ block is free.
        lift.view_mut((zw, vw), (nw, nw)).fill_with_identity();
        // ŷ_i = C x̂_i + ŵ²_i
        let y_rows = &sys.c * &s_mat;
        lift.view_mut((zy, 0), (ny, dim_v)).copy_from(&y_rows);
        for k in 0..ny {
            lift[(zy + k, vw + nx + k)] += 1.0;
        }
        offset.rows_mut(zy, ny).copy_from(&(&sys.c * &s_off));
        reference.rows_mut(zy, ny).copy_from(&y_window[i]);
        // x̂_{i+1} = A x̂_i + B u_i + ŵ¹_i
        s_mat = &sys.a * &s_mat;
        for k in 0..nx {
            s_mat[(k, vw + k)] += 1.0;
        }
        s_off = &sys.a * &s_off + &sys.b * &u_window[i];
    }

    let mut boxes = sys.x_box.0.clone();
    for _ in 0..horizon {
        boxes.extend(sys.w1_box.0.iter().copied());
        boxes.extend(sys.w2_box.0.iter().copied());
    }

    Ok(MheProblem {
        t,
        horizon,
        dims,
        weight: compute_weight(horizon, cert),
        reference,
        lift,
        offset,
        boxes: BoxSet(boxes),
        x_prior: x_prior.clone(),
        u_window: u_window.to_vec(),
        y_window: y_window.to_vec(),
        a: sys.a.clone(),
        b: sys.b.clone(),
        x_box: sys.x_box.clone(),
        y_box: sys.y_box.clone(),
    })
}

impl MheProblem {
    pub fn dim_z(&self) -> usize {
        self.lift.nrows()
    }

    pub fn dim_v(&self) -> usize {
        self.lift.ncols()
    }

    pub fn lift_point(&self, v: &DVector<f64>) -> CondensedPoint {
        CondensedPoint {
            z: &self.lift * v + &self.offset,
            v: Some(v.clone()),
        }
    }

    /// Reads the initial-state and disturbance blocks of `z`; the `ŷ` blocks
    /// are discarded because the lift reconstructs them.
    pub fn free_from_z(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.dim_z() {
            return Err(Error::dims("z", self.dim_z(), z.len()));
        }
        let d = self.dims;
        let mut v = DVector::zeros(self.dim_v());
        v.rows_mut(0, d.nx).copy_from(&z.rows(0, d.nx));
        for i in 0..self.horizon {
            v.rows_mut(d.nx + i * d.nw(), d.nw()).copy_from(&z.rows(d.nx + i * d.block(), d.nw()));
        }
        Ok(v)
    }

    /// `‖z − z̃‖²_{H_t}`.
    pub fn cost_z(&self, z: &DVector<f64>) -> f64 {
        weighted_sq_norm(&(z - &self.reference), &self.weight)
    }

    pub fn cost_v(&self, v: &DVector<f64>) -> f64 {
        self.cost_z(&(&self.lift * v + &self.offset))
    }

    /// `2ΨᵀH_tΨ`.
    pub fn reduced_hessian(&self) -> DMatrix<f64> {
        let hp = &self.weight * &self.lift;
        (self.lift.transpose() * hp).scale(2.0)
    }

    /// `2ΨᵀH_t(ψ − z̃)`, the reduced gradient at `v = 0`.
    pub fn reduced_linear(&self) -> DVector<f64> {
        (self.lift.transpose() * (&self.weight * (&self.offset - &self.reference))).scale(2.0)
    }

    pub fn gradient_v(&self, v: &DVector<f64>) -> DVector<f64> {
        let r = &self.lift * v + &self.offset - &self.reference;
        (self.lift.transpose() * (&self.weight * r)).scale(2.0)
    }

    pub fn initial_state_block(&self, z: &DVector<f64>) -> DVector<f64> {
        z.rows(0, self.dims.nx).into_owned()
    }

    pub fn disturbance_block(&self, z: &DVector<f64>, i: usize) -> DVector<f64> {
        z.rows(self.dims.nx + i * self.dims.block(), self.dims.nw()).into_owned()
    }

    pub fn output_block(&self, z: &DVector<f64>, i: usize) -> DVector<f64> {
        z.rows(self.dims.nx + i * self.dims.block() + self.dims.nw(), self.dims.ny).into_owned()
    }

    /// Whether the reconstructed states (after the first) and outputs of `z`
    /// satisfy the state and output boxes, which the free-variable boxes do
    /// not enforce.
    pub fn coupled_constraints_hold(&self, z: &DVector<f64>) -> Result<bool> {
        let states = extract_estimate(self, z)?;
        let states_ok = states.iter().skip(1).all(|x| self.x_box.contains(x));
        let outputs_ok = (0..self.horizon).all(|i| self.y_box.contains(&self.output_block(z, i)));
        Ok(states_ok && outputs_ok)
    }
}

/// Warm start for step `t` from the K-iterate of step `t − 1`: zero-padded by
/// one `[ŵ; ŷ]` block while the window grows, unchanged afterwards.
pub fn sigma_lift(z_prev: &DVector<f64>, t: usize, horizon_cap: usize, dims: Dims) -> Result<DVector<f64>> {
    if t == 0 {
        return Err(Error::InvalidParameter {
            name: "t".into(),
            reason: "warm start is defined for t >= 1".into(),
        });
    }
    let prev_horizon = effective_horizon(horizon_cap, t - 1);
    let expected = dims.dim_z(prev_horizon);
    if z_prev.len() != expected {
        return Err(Error::dims("z_prev", expected, z_prev.len()));
    }
    if t - 1 < horizon_cap {
        let mut out = DVector::zeros(expected + dims.block());
        out.rows_mut(0, expected).copy_from(z_prev);
        Ok(out)
    } else {
        Ok(z_prev.clone())
    }
}

/// Appends `new_item`, dropping the oldest entry once the window is full so
/// the result has length `min(M, t + 1)`.
pub fn shift_window<T: Clone>(seq: &[T], new_item: T, t: usize, horizon_cap: usize) -> Vec<T> {
    let mut out: Vec<T> = seq.to_vec();
    out.push(new_item);
    let target = horizon_cap.min(t + 1);
    let excess = out.len().saturating_sub(target);
    out.drain(0..excess);
    out
}

/// Forward-simulates the estimated window `x̂_{t−M_t|t}, …, x̂_{t|t}` from
/// the initial-state and process-disturbance blocks of `z`.
pub fn extract_estimate(problem: &MheProblem, z: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    if z.len() != problem.dim_z() {
        return Err(Error::dims("z", problem.dim_z(), z.len()));
    }
    let nx = problem.dims.nx;
    let mut states = Vec::with_capacity(problem.horizon + 1);
    let mut x = problem.initial_state_block(z);
    states.push(x.clone());
    for i in 0..problem.horizon {
        let w1 = problem.disturbance_block(z, i).rows(0, nx).into_owned();
        x = &problem.a * &x + &problem.b * &problem.u_window[i] + w1;
        states.push(x.clone());
    }
    Ok(states)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SigmaValue {
    pub raw: f64,
    pub clamped: f64,
    pub was_clamped: bool,
}

/// Virtual disturbance of the growing-window phase,
/// `(1 − η⁻¹)‖H_t‖ + ‖A‖ + ‖B‖ + ‖C‖ + 2` for `t ≤ M`, zero afterwards.
/// The first term is negative for `η < 1`; the value is clamped at zero.
pub fn residual_sigma(t: usize, horizon_cap: usize, weight: &DMatrix<f64>, sys: &LtiSystem, eta: f64) -> SigmaValue {
    if t > horizon_cap {
        return SigmaValue {
            raw: 0.0,
            clamped: 0.0,
            was_clamped: false,
        };
    }
    let h_norm = crate::linalg::max_eigenvalue(weight);
    let raw = (1.0 - 1.0 / eta) * h_norm + spectral_norm(&sys.a) + spectral_norm(&sys.b) + spectral_norm(&sys.c) + 2.0;
    let raw = if raw.is_nan() { f64::NEG_INFINITY } else { raw };
    SigmaValue {
        raw,
        clamped: raw.max(0.0),
        was_clamped: raw < 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Interval, LtiSystem};
    use approx::assert_relative_eq;

    fn cert(nx: usize, ny: usize, eta: f64) -> IossCertificate {
        IossCertificate::new(
            DMatrix::identity(nx, nx),
            DMatrix::identity(nx + ny, nx + ny),
            DMatrix::identity(ny, ny),
            eta,
            1e-8,
        )
        .unwrap()
    }

    fn scalar(a: f64, b: f64, c: f64) -> LtiSystem {
        LtiSystem::unconstrained(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, c),
        )
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn weight_empty_window_is_twice_p() {
        assert_eq!(compute_weight(0, &cert(2, 1, 0.5)), DMatrix::identity(2, 2) * 2.0);
    }

    #[test]
    fn weight_single_step() {
        let h = compute_weight(1, &cert(1, 1, 0.8));
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![1.6, 2.0, 2.0, 1.0]));
        assert_relative_eq!(h, expected, epsilon = 1e-15);
    }

    #[test]
    fn reference_layout() {
        let sys = scalar(1.0, 1.0, 1.0);
        let p = build_problem(&sys, &cert(1, 1, 0.5), &v1(7.0), &[v1(0.0), v1(0.0)], &[v1(3.0), v1(4.0)], 5, 2).unwrap();
        assert_eq!(p.reference.as_slice(), &[7.0, 0.0, 0.0, 3.0, 0.0, 0.0, 4.0]);
        assert_eq!(p.dim_z(), 7);
        assert_eq!(p.dim_v(), 5);
    }

    #[test]
    fn t_zero_has_prior_only() {
        let sys = scalar(0.9, 1.0, 1.0);
        let p = build_problem(&sys, &cert(1, 1, 0.5), &v1(7.0), &[], &[], 5, 0).unwrap();
        assert_eq!(p.horizon, 0);
        assert_eq!(p.dim_v(), 1);
        assert_eq!(p.lift, DMatrix::identity(1, 1));
        // Unconstrained minimizer of 2‖v − prior‖²_P.
        assert_eq!(p.cost_v(&v1(7.0)), 0.0);
    }

    #[test]
    fn collapsed_disturbances_output_block_follows_state() {
        let mut sys = scalar(1.0, 0.0, 1.0);
        sys.w1_box = BoxSet(vec![Interval::new(0.0, 0.0)]);
        sys.w2_box = BoxSet(vec![Interval::new(0.0, 0.0)]);
        let p = build_problem(&sys, &cert(1, 1, 0.5), &v1(0.0), &[v1(0.0)], &[v1(1.0)], 5, 1).unwrap();
        let v = p.boxes.clamp(&DVector::from_vec(vec![2.5, 0.3, -0.2]));
        assert_eq!(v.as_slice(), &[2.5, 0.0, 0.0]);
        let z = p.lift_point(&v).z;
        assert_eq!(p.output_block(&z, 0)[0], 2.5);
    }

    #[test]
    fn window_length_mismatch() {
        let sys = scalar(1.0, 1.0, 1.0);
        let err = build_problem(&sys, &cert(1, 1, 0.5), &v1(0.0), &[v1(0.0)], &[], 5, 1).unwrap_err();
        assert!(matches!(err, Error::WindowLengthMismatch { .. }));
    }

    #[test]
    fn sigma_lift_pads_then_identity() {
        let dims = Dims { nx: 2, ny: 1 };
        let z = DVector::from_vec(vec![1.0, 2.0]);
        let lifted = sigma_lift(&z, 1, 3, dims).unwrap();
        assert_eq!(lifted.len(), 2 + 3 + 1);
        assert_eq!(lifted.norm(), z.norm());
        let full = DVector::from_element(dims.dim_z(3), 1.5);
        assert_eq!(sigma_lift(&full, 4, 3, dims).unwrap(), full);
        assert!(sigma_lift(&z, 2, 3, dims).is_err());
    }

    #[test]
    fn shift_window_examples() {
        assert_eq!(shift_window::<i32>(&[], 9, 0, 5), vec![9]);
        assert_eq!(shift_window(&[1, 2], 3, 2, 5), vec![1, 2, 3]);
        assert_eq!(shift_window(&[1, 2, 3, 4, 5], 6, 5, 5), vec![2, 3, 4, 5, 6]);
        assert_eq!(shift_window(&[2, 3, 4, 5, 6], 7, 6, 5), vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn extract_estimate_identity_dynamics() {
        let sys = LtiSystem::unconstrained(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        let zero_u = DVector::zeros(1);
        let y = DVector::zeros(1);
        let p = build_problem(&sys, &cert(2, 1, 0.5), &DVector::zeros(2), &[zero_u.clone(), zero_u], &[y.clone(), y], 4, 2).unwrap();
        let mut v = DVector::zeros(p.dim_v());
        v[0] = 3.0;
        v[1] = -1.0;
        let states = extract_estimate(&p, &p.lift_point(&v).z).unwrap();
        assert_eq!(states.len(), 3);
        for s in &states {
            assert_eq!(s.as_slice(), &[3.0, -1.0]);
        }
    }

    #[test]
    fn extract_estimate_doubling() {
        let sys = scalar(2.0, 0.0, 1.0);
        let p = build_problem(&sys, &cert(1, 1, 0.5), &v1(0.0), &[v1(0.0), v1(0.0)], &[v1(0.0), v1(0.0)], 5, 2).unwrap();
        let mut v = DVector::zeros(p.dim_v());
        v[0] = 1.0;
        let states = extract_estimate(&p, &p.lift_point(&v).z).unwrap();
        let got: Vec<f64> = states.iter().map(|s| s[0]).collect();
        assert_eq!(got, vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn sigma_zero_after_horizon_and_unit_eta_limit() {
        let sys = scalar(0.5, 2.0, 3.0);
        let h = compute_weight(2, &cert(1, 1, 0.5));
        assert_eq!(residual_sigma(6, 5, &h, &sys, 0.5).raw, 0.0);
        let s = residual_sigma(2, 5, &h, &sys, 1.0);
        assert_relative_eq!(s.raw, 0.5 + 2.0 + 3.0 + 2.0, epsilon = 1e-14);
        assert!(!s.was_clamped);
    }

    #[test]
    fn sigma_clamped_when_negative() {
        let sys = scalar(0.0, 0.0, 0.0);
        let big = DMatrix::identity(2, 2) * 100.0;
        let s = residual_sigma(1, 5, &big, &sys, 0.5);
        assert!(s.raw < 0.0);
        assert_eq!(s.clamped, 0.0);
        assert!(s.was_clamped);
    }
}
