//! Small-gain analysis: the constants `C₁ … C_ε`, the linear gain slopes of
//! the sub-optimality and estimation-error subsystems, the three small-gain
//! conditions and the search for the smallest certified iteration count.
//!
//! Every gain here is linear, so compositions of gains reduce to products of
//! slopes.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{max_eigenvalue, min_eigenvalue, spectral_norm};
use crate::mhe::{build_problem, compute_weight};
use crate::model::{IossCertificate, LtiSystem};
use crate::solver::{contraction_rate, StepRule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalysisParams {
    pub l_phi: f64,
    pub l_pi: f64,
    pub gamma13_slope: f64,
    pub eta: f64,
    pub horizon: usize,
    /// `q` in `φ(K) = q^K`.
    pub phi_base: f64,
    pub norm_c: f64,
    /// `H̄ = sup_t λ_max(H_t)`.
    pub bar_h: f64,
    /// `Λ^H̄_P = H̄ / λ_min(P)`.
    pub lambda_h_p: f64,
    /// `Λ^P_P = λ_max(P) / λ_min(P)`.
    pub lambda_p_p: f64,
    /// `Λ^Q_P = λ_max(Q) / λ_min(P)`.
    pub lambda_q_p: f64,
}

fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.into(),
        reason: reason.into(),
    }
}

impl AnalysisParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_phi > 1.0) || !self.l_phi.is_finite() {
            return Err(invalid("L_Phi", format!("must be a finite value > 1, got {}", self.l_phi)));
        }
        if !(self.l_pi >= 0.0) || !self.l_pi.is_finite() {
            return Err(invalid("L_pi", format!("must be finite and nonnegative, got {}", self.l_pi)));
        }
        if !(self.gamma13_slope >= 0.0) || !self.gamma13_slope.is_finite() {
            return Err(invalid("gamma13_slope", format!("must be finite and nonnegative, got {}", self.gamma13_slope)));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(invalid("eta", format!("must lie in [0, 1), got {}", self.eta)));
        }
        if self.horizon < 1 {
            return Err(invalid("M", "horizon must be at least 1"));
        }
        if !(self.phi_base > 0.0 && self.phi_base < 1.0) {
            return Err(invalid("phi_base", format!("must lie in (0, 1), got {}", self.phi_base)));
        }
        if !(self.norm_c >= 0.0) {
            return Err(invalid("norm_C", "must be nonnegative"));
        }
        for (name, v) in [("bar_H", self.bar_h), ("Lambda_H_P", self.lambda_h_p), ("Lambda_P_P", self.lambda_p_p), ("Lambda_Q_P", self.lambda_q_p)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(name, format!("must be finite and positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Fills the certificate-dependent scalars from the weights `H_t`,
    /// `t ∈ [0, M]`.
    pub fn from_certificate(sys: &LtiSystem, cert: &IossCertificate, horizon: usize, phi_base: f64, l_phi: f64, l_pi: f64, gamma13_slope: f64) -> Result<Self> {
        let bar_h = sup_weight_eigenvalue(cert, horizon);
        let p_min = min_eigenvalue(&cert.p);
        let params = AnalysisParams {
            l_phi,
            l_pi,
            gamma13_slope,
            eta: cert.eta,
            horizon,
            phi_base,
            norm_c: spectral_norm(&sys.c),
            bar_h,
            lambda_h_p: bar_h / p_min,
            lambda_p_p: max_eigenvalue(&cert.p) / p_min,
            lambda_q_p: max_eigenvalue(&cert.q) / p_min,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn phi(&self, k: usize) -> f64 {
        self.phi_base.powf(k as f64)
    }
}

/// `max_{t ∈ [0, M]} λ_max(H_t)`; every later `H_t` equals `H_M`.
pub fn sup_weight_eigenvalue(cert: &IossCertificate, horizon: usize) -> f64 {
    (0..=horizon).map(|t| max_eigenvalue(&compute_weight(t, cert))).fold(f64::NEG_INFINITY, f64::max)
}

/// Worst contraction base of the solver over every problem shape
/// `t ∈ [0, M]`. The Hessians do not depend on the measured data.
pub fn sup_phi_base(sys: &LtiSystem, cert: &IossCertificate, horizon: usize, rule: StepRule) -> Result<f64> {
    let mut q: f64 = 0.0;
    for t in 0..=horizon {
        let m = t.min(horizon);
        let u = vec![DVector::zeros(sys.nu()); m];
        let y = vec![DVector::zeros(sys.ny()); m];
        let problem = build_problem(sys, cert, &DVector::zeros(sys.nx()), &u, &y, horizon, t)?;
        q = q.max(contraction_rate(&problem, rule)?.base);
    }
    Ok(q)
}

/// `ρ = 6^{1/M} η`, unchecked.
pub fn rho_value(eta: f64, horizon: usize) -> f64 {
    6f64.powf(1.0 / horizon as f64) * eta
}

/// Smallest `M ≥ 1` with `6^{1/M} η < 1`.
pub fn min_contracting_horizon(eta: f64) -> usize {
    if eta <= 0.0 {
        return 1;
    }
    let guess = (6f64.ln() / (1.0 / eta).ln()).floor().max(0.0) as usize + 1;
    let mut m = guess.saturating_sub(2).max(1);
    while rho_value(eta, m) >= 1.0 {
        m += 1;
    }
    m
}

pub fn compute_rho(eta: f64, horizon: usize) -> Result<f64> {
    if horizon < 1 {
        return Err(invalid("M", "horizon must be at least 1"));
    }
    if !(0.0..1.0).contains(&eta) {
        return Err(invalid("eta", format!("must lie in [0, 1), got {eta}")));
    }
    let rho = rho_value(eta, horizon);
    if rho >= 1.0 {
        return Err(Error::ContractionViolated {
            rho,
            horizon,
            min_horizon: min_contracting_horizon(eta),
        });
    }
    Ok(rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AppendixConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c_e: f64,
    pub c_w: f64,
    pub c_eps: f64,
}

/// Literal evaluation of the appendix constants at `K`; `ρ` must already
/// have passed [`compute_rho`].
pub fn appendix_constants(k: usize, params: &AnalysisParams) -> Result<AppendixConstants> {
    let rho = compute_rho(params.eta, params.horizon)?;
    Ok(constants_with_rho(k, params, rho))
}

fn constants_with_rho(k: usize, p: &AnalysisParams, rho: f64) -> AppendixConstants {
    let phi = p.phi(k);
    let m = p.horizon as f64;
    let s = rho.sqrt();
    let c1 = 2.0 * phi * p.l_phi * (1.0 + m * (p.norm_c + p.l_pi));
    let c2 = 2.0 * phi * p.l_phi * (1.0 + m * p.l_pi);
    let c3 = 2.0 * phi * p.l_phi * m;

    let root_pp_hp = (3.0 * p.lambda_p_p * p.lambda_h_p).sqrt();
    let tail: f64 = (1..p.horizon).map(|i| s.powi(-1 - i as i32)).sum();
    let c_e = 2.0 * root_pp_hp * phi * p.l_phi * (s.powi(-(p.horizon as i32)) + p.l_pi / s)
        + 4.0 * root_pp_hp * phi * p.l_phi * p.l_pi * tail
        + (6.0 * p.lambda_p_p).sqrt()
        + 2.0 * root_pp_hp * phi * p.l_phi * (p.l_pi + 1.0) * s.powi(-(p.horizon as i32) - 1);

    let c_w = (2.0 * p.lambda_h_p).sqrt() * c3
        + (6.0 * p.lambda_q_p).sqrt() / (1.0 - s)
        + 4.0 * (3.0 * p.lambda_h_p * p.lambda_q_p).sqrt() * phi * p.l_phi * (p.l_pi * m + 1.0) / (1.0 - s);

    let decay_m = 1.0 - rho.powf(m).sqrt();
    let c_eps = (2.0 * p.lambda_h_p).sqrt() * phi + (2.0 * p.lambda_h_p).sqrt() / decay_m + 4.0 * p.lambda_h_p * phi * p.l_phi * (p.l_pi * m + 1.0) / decay_m;

    AppendixConstants { c1, c2, c3, c_e, c_w, c_eps }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainSlopes {
    pub gamma21: f64,
    pub gamma23: f64,
    pub gamma2_w: f64,
    pub gamma2_sigma: f64,
    pub gamma31: f64,
    pub gamma32: f64,
    pub gamma3_w: f64,
    pub gamma3_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionVerdict {
    pub product: f64,
    /// `1 − product`; the condition holds iff the margin is positive.
    pub margin: f64,
    pub pass: bool,
}

impl ConditionVerdict {
    fn of(product: f64) -> Self {
        let margin = 1.0 - product;
        ConditionVerdict {
            product,
            margin,
            pass: product < 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmallGainVerdict {
    /// `γ₁,₃ · γ₃,₁ < 1`
    pub closed_loop_estimation: ConditionVerdict,
    /// `γ₂,₃ · γ₃,₂ < 1`
    pub solver_estimation: ConditionVerdict,
    /// `γ₁,₃ · γ₃,₂ · γ₂,₁ < 1`
    pub three_loop: ConditionVerdict,
    pub pass: bool,
}

impl SmallGainVerdict {
    pub fn worst_margin(&self) -> f64 {
        self.closed_loop_estimation.margin.min(self.solver_estimation.margin).min(self.three_loop.margin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainLedger {
    pub k: usize,
    pub phi: f64,
    pub rho: f64,
    pub gamma13: f64,
    pub constants: AppendixConstants,
    pub slopes: GainSlopes,
    /// `β₂(s, t) = φ(K)ᵗ s`.
    pub beta2_base: f64,
    /// `β₃(s, t) = C_e(K) √ρᵗ s`.
    pub beta3_coefficient: f64,
    pub beta3_base: f64,
    pub verdict: SmallGainVerdict,
}

pub fn gain_slopes(k: usize, params: &AnalysisParams) -> Result<GainSlopes> {
    let c = appendix_constants(k, params)?;
    Ok(slopes_from(k, params, &c))
}

fn slopes_from(k: usize, p: &AnalysisParams, c: &AppendixConstants) -> GainSlopes {
    let phi = p.phi(k);
    let root_h = (2.0 * p.lambda_h_p).sqrt();
    GainSlopes {
        gamma21: c.c1 / (1.0 - phi),
        gamma23: c.c2 / (1.0 - phi),
        gamma2_w: c.c3 / (1.0 - phi),
        gamma2_sigma: phi * p.l_phi / (1.0 - phi),
        gamma31: root_h * c.c1,
        gamma32: c.c_eps,
        gamma3_w: c.c_w,
        gamma3_sigma: root_h * phi * p.l_phi,
    }
}

pub fn verdict_from_slopes(gamma13: f64, s: &GainSlopes) -> SmallGainVerdict {
    let a = ConditionVerdict::of(gamma13 * s.gamma31);
    let b = ConditionVerdict::of(s.gamma23 * s.gamma32);
    let c = ConditionVerdict::of(gamma13 * s.gamma32 * s.gamma21);
    SmallGainVerdict {
        closed_loop_estimation: a,
        solver_estimation: b,
        three_loop: c,
        pass: a.pass && b.pass && c.pass,
    }
}

/// Full ledger at `K`.
pub fn small_gain_check(k: usize, params: &AnalysisParams) -> Result<GainLedger> {
    params.validate()?;
    let rho = compute_rho(params.eta, params.horizon)?;
    Ok(ledger_with_rho(k, params, rho))
}

fn ledger_with_rho(k: usize, params: &AnalysisParams, rho: f64) -> GainLedger {
    let constants = constants_with_rho(k, params, rho);
    let slopes = slopes_from(k, params, &constants);
    GainLedger {
        k,
        phi: params.phi(k),
        rho,
        gamma13: params.gamma13_slope,
        constants,
        slopes,
        beta2_base: params.phi(k),
        beta3_coefficient: constants.c_e,
        beta3_base: rho.sqrt(),
        verdict: verdict_from_slopes(params.gamma13_slope, &slopes),
    }
}

/// Ledger evaluated with `ρ ≥ 1` allowed, for uncertified runs; the
/// constants that involve geometric series are then meaningless.
pub fn uncertified_ledger(k: usize, params: &AnalysisParams) -> GainLedger {
    ledger_with_rho(k, params, rho_value(params.eta, params.horizon))
}

/// Smallest `K ∈ [1, K_max]` passing all three conditions, by linear scan.
pub fn min_iterations(params: &AnalysisParams, k_max: usize) -> Result<GainLedger> {
    params.validate()?;
    let rho = compute_rho(params.eta, params.horizon)?;
    let mut best: Option<(usize, f64)> = None;
    for k in 1..=k_max {
        let ledger = ledger_with_rho(k, params, rho);
        if ledger.verdict.pass {
            return Ok(ledger);
        }
        let worst = ledger.verdict.worst_margin();
        if best.is_none_or(|(_, m)| worst > m) {
            best = Some((k, worst));
        }
    }
    let (best_k, best_margin) = best.unwrap_or((0, f64::NEG_INFINITY));
    Err(Error::NotFoundBelowCap { k_max, best_k, best_margin })
}
