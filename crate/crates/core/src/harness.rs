//! Closed-loop execution of sub-optimal MHE with state feedback, runtime
//! checks of the per-step bounds, trajectory logging, and the sample-based
//! probe for the Lipschitz constant of the optimal solution map.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::analysis::{rho_value, sup_weight_eigenvalue, uncertified_ledger, AnalysisParams, GainLedger};
use crate::controller::{evaluate, FeedbackLaw, DIVERGENCE_LIMIT};
use crate::error::{Error, Result};
use crate::linalg::weighted_sq_norm;
use crate::mhe::{build_problem, effective_horizon, extract_estimate, residual_sigma, shift_window, sigma_lift, MheProblem, SigmaValue};
use crate::model::{w_delta, AugmentedDisturbance, BoxSet, IossCertificate, LtiSystem};
use crate::sampling::{require_bounded, seeded, uniform_cube, uniform_in_box, PRNG_NAME};
use crate::solver::{solve_fixed_iters, solve_oracle, StepRule};

/// Relative tolerance of the M-step Lyapunov check.
pub const LYAPUNOV_REL_TOL: f64 = 1e-7;
/// Relative tolerance of the sub-optimality and trajectory-bound checks.
pub const BOUND_REL_TOL: f64 = 1e-9;
/// Absolute slack of the solver contraction check.
pub const CONTRACTION_ABS_TOL: f64 = 1e-9;

/// Draws `w_t = [w¹_t; w²_t]` elementwise uniformly, `w¹` before `w²` at
/// every step.
pub fn sample_disturbance(seed: u64, w1_box: &BoxSet, w2_box: &BoxSet, steps: usize) -> Result<Vec<AugmentedDisturbance>> {
    require_bounded(w1_box, "w1_box")?;
    require_bounded(w2_box, "w2_box")?;
    let mut rng = seeded(seed);
    Ok((0..steps)
        .map(|_| {
            let w1 = uniform_in_box(&mut rng, w1_box);
            let w2 = uniform_in_box(&mut rng, w2_box);
            AugmentedDisturbance { w1, w2 }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MonitorToggles {
    pub recursion: bool,
    pub lyapunov: bool,
    pub trajectory: bool,
    pub contraction: bool,
}

impl Default for MonitorToggles {
    fn default() -> Self {
        MonitorToggles {
            recursion: true,
            lyapunov: true,
            trajectory: true,
            contraction: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub sys: LtiSystem,
    pub cert: IossCertificate,
    pub law: FeedbackLaw,
    pub horizon: usize,
    pub iterations: usize,
    pub steps: usize,
    pub x0: DVector<f64>,
    pub x_prior0: DVector<f64>,
    /// Warm start of the `t = 0` problem, whose decision vector is the
    /// initial state alone.
    pub z0: DVector<f64>,
    pub seed: u64,
    pub monitors: MonitorToggles,
    /// Oracle KKT tolerance; `None` disables the oracle and with it `ε_t`.
    pub oracle_tol: Option<f64>,
    pub step_rule: StepRule,
    /// Needed for the sub-optimality recursion and the trajectory bounds.
    pub analysis: Option<AnalysisParams>,
    pub strict: bool,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let nx = self.sys.nx();
        if self.steps < 1 {
            return Err(Error::InvalidParameter {
                name: "steps".into(),
                reason: "at least one step is required".into(),
            });
        }
        if self.horizon < 1 {
            return Err(Error::InvalidParameter {
                name: "M".into(),
                reason: "horizon must be at least 1".into(),
            });
        }
        for (what, v) in [("x0", &self.x0), ("prior", &self.x_prior0), ("z0", &self.z0)] {
            if v.len() != nx {
                return Err(Error::dims(what, nx, v.len()));
            }
        }
        self.cert.check_dims(&self.sys)?;
        if self.law.nx() != nx || self.law.gain.nrows() != self.sys.nu() {
            return Err(Error::dims("controller gain", format!("{}x{}", self.sys.nu(), nx), format!("{}x{}", self.law.gain.nrows(), self.law.nx())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Skip,
}

impl Verdict {
    fn of(holds: bool) -> Self {
        if holds {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Skip => "skip",
        }
    }
}

/// Per-step verdicts, with the two sides of each inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonitorVerdicts {
    pub recursion: Verdict,
    pub lyapunov: Verdict,
    pub lyapunov_lhs: f64,
    pub lyapunov_rhs: f64,
    pub trajectory: Verdict,
    pub contraction: Verdict,
}

impl MonitorVerdicts {
    fn named(&self) -> [(&'static str, Verdict); 4] {
        [
            ("recursion", self.recursion),
            ("lyapunov", self.lyapunov),
            ("trajectory", self.trajectory),
            ("contraction", self.contraction),
        ]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub e_norm: f64,
    pub eps: Option<f64>,
    pub w_delta: f64,
    pub sigma: SigmaValue,
    /// Every `ŵ²` block of `zᴷ_t` lies in `w2_box`.
    pub w2_feasible: bool,
    /// Reconstructed states and outputs of `zᴷ_t` satisfy the state and
    /// output boxes.
    pub coupled_feasible: bool,
    pub warm_start_dim: usize,
    pub problem_dim: usize,
    #[serde(skip)]
    pub z_k: DVector<f64>,
    pub monitors: MonitorVerdicts,
}

#[derive(Debug, Clone, Serialize)]
pub struct LogHeader {
    pub prng: String,
    pub seed: u64,
    pub config_hash: Option<String>,
    pub horizon: usize,
    pub iterations: usize,
    pub steps: usize,
    pub step_rule: StepRule,
    pub oracle_tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct VerdictCounts {
    pub pass: usize,
    pub fail: usize,
    pub skip: usize,
}

impl VerdictCounts {
    fn add(&mut self, v: Verdict) {
        match v {
            Verdict::Pass => self.pass += 1,
            Verdict::Fail => self.fail += 1,
            Verdict::Skip => self.skip += 1,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerdictSummary {
    pub recursion: VerdictCounts,
    pub lyapunov: VerdictCounts,
    pub trajectory: VerdictCounts,
    pub contraction: VerdictCounts,
    /// Why a monitor was skipped for the whole run.
    pub skipped: Vec<String>,
    pub first_failure: Option<(usize, String)>,
}

impl VerdictSummary {
    pub fn all_pass(&self) -> bool {
        self.first_failure.is_none()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryLog {
    pub header: LogHeader,
    pub rows: Vec<TrajectoryRow>,
    pub ledger: Option<GainLedger>,
    pub summary: VerdictSummary,
}

impl TrajectoryLog {
    pub fn csv_header(&self) -> String {
        let first = &self.rows[0];
        let mut cols = vec!["t".to_string()];
        for (name, n) in [("x", first.x.len()), ("y", first.y.len()), ("u", first.u.len()), ("xhat", first.x_hat.len())] {
            cols.extend((0..n).map(|i| format!("{name}{i}")));
        }
        for c in [
            "e_norm",
            "eps",
            "w_delta",
            "sigma_raw",
            "sigma_clamped",
            "w2_feasible",
            "coupled_feasible",
            "mon_recursion",
            "mon_lyapunov",
            "mon_trajectory",
            "mon_contraction",
        ] {
            cols.push(c.to_string());
        }
        cols.join(",")
    }

    /// One row per step, fixed column order; floats in shortest round-trip
    /// form, so output is byte-for-byte reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.rows.is_empty() {
            return out;
        }
        out.push_str(&self.csv_header());
        out.push('\n');
        for r in &self.rows {
            let mut fields = vec![r.t.to_string()];
            for v in r.x.iter().chain(&r.y).chain(&r.u).chain(&r.x_hat) {
                fields.push(format!("{v}"));
            }
            fields.push(format!("{}", r.e_norm));
            fields.push(r.eps.map(|e| format!("{e}")).unwrap_or_default());
            fields.push(format!("{}", r.w_delta));
            fields.push(format!("{}", r.sigma.raw));
            fields.push(format!("{}", r.sigma.clamped));
            fields.push(r.w2_feasible.to_string());
            fields.push(r.coupled_feasible.to_string());
            for (_, v) in r.monitors.named() {
                fields.push(v.as_str().to_string());
            }
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }
}

fn sup_norm<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    values.into_iter().copied().fold(0.0, f64::max)
}

/// `lhs ≤ rhs` up to `rel_tol · max(|rhs|, tiny)`.
fn within(lhs: f64, rhs: f64, rel_tol: f64) -> bool {
    lhs <= rhs + rel_tol * rhs.abs().max(1e-12)
}

/// Per-step magnitudes recorded so far, one entry per completed step.
#[derive(Debug, Clone, Default)]
pub struct MonitorHistory {
    pub x_norm: Vec<f64>,
    pub e_norm: Vec<f64>,
    pub w_norm: Vec<f64>,
    pub eps: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Which monitors run. Skip decisions are made once per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnabledMonitors {
    pub recursion: bool,
    pub lyapunov: bool,
    pub trajectory: bool,
    pub contraction: bool,
}

pub struct StepContext<'a> {
    pub t: usize,
    /// Window length at `t`.
    pub window: usize,
    pub eta: f64,
    pub noise_weight: &'a DMatrix<f64>,
    pub bar_h: f64,
    /// `‖z_K − z*‖`, `None` without the oracle.
    pub eps: Option<f64>,
    pub e_norm: f64,
    pub w_delta: f64,
    /// `W_δ` of the filtered estimate against the true state at `t − window`.
    pub anchor_w_delta: f64,
    /// Disturbances `w_{t−window} .. w_{t−1}`, oldest first.
    pub recent_w: &'a [AugmentedDisturbance],
    pub history: &'a MonitorHistory,
    pub ledger: Option<&'a GainLedger>,
    pub l_phi: f64,
    /// `(q, K, ‖z⁰ − z*‖)`.
    pub contraction: Option<(f64, usize, f64)>,
    pub enabled: EnabledMonitors,
}

/// Evaluates the four runtime monitors for one step.
pub fn monitor_step(ctx: &StepContext) -> MonitorVerdicts {
    let t = ctx.t;
    let hist = ctx.history;

    let (lyapunov, lyapunov_lhs, lyapunov_rhs) = if ctx.enabled.lyapunov {
        let eps_v = ctx.eps.unwrap_or(0.0);
        let m_t = ctx.window;
        let noise: f64 = (1..=m_t)
            .map(|j| ctx.eta.powi(j as i32 - 1) * weighted_sq_norm(&ctx.recent_w[m_t - j].stacked(), ctx.noise_weight))
            .sum();
        let rhs = 6.0 * ctx.eta.powi(m_t as i32) * ctx.anchor_w_delta + 2.0 * ctx.bar_h * eps_v * eps_v + 6.0 * noise;
        (Verdict::of(within(ctx.w_delta, rhs, LYAPUNOV_REL_TOL)), ctx.w_delta, rhs)
    } else {
        (Verdict::Skip, f64::NAN, f64::NAN)
    };

    let recursion = match (ctx.enabled.recursion && t >= 1, ctx.ledger, ctx.eps) {
        (true, Some(l), Some(eps_t)) => {
            let c = &l.constants;
            let rhs = l.phi * hist.eps[t - 1]
                + c.c1 * sup_norm(&hist.x_norm)
                + c.c2 * sup_norm(&hist.e_norm)
                + c.c3 * sup_norm(&hist.w_norm)
                + l.phi * ctx.l_phi * sup_norm(&hist.sigma);
            Verdict::of(within(eps_t, rhs, BOUND_REL_TOL))
        }
        _ => Verdict::Skip,
    };

    let trajectory = match (ctx.enabled.trajectory, ctx.ledger, ctx.eps) {
        (true, Some(l), Some(eps_t)) => {
            let s = &l.slopes;
            let (xs, es, ws, sg) = (sup_norm(&hist.x_norm), sup_norm(&hist.e_norm), sup_norm(&hist.w_norm), sup_norm(&hist.sigma));
            let eps0 = hist.eps.first().copied().unwrap_or(eps_t);
            let e0 = hist.e_norm.first().copied().unwrap_or(ctx.e_norm);
            let eps_bound = l.phi.powi(t as i32) * eps0 + s.gamma21 * xs + s.gamma23 * es + s.gamma2_w * ws + s.gamma2_sigma * sg;
            let e_bound = l.constants.c_e * l.beta3_base.powi(t as i32) * e0 + s.gamma31 * xs + s.gamma32 * sup_norm(&hist.eps) + s.gamma3_w * ws + s.gamma3_sigma * sg;
            Verdict::of(within(eps_t, eps_bound, BOUND_REL_TOL) && within(ctx.e_norm, e_bound, BOUND_REL_TOL))
        }
        _ => Verdict::Skip,
    };

    let contraction = match (ctx.contraction, ctx.eps, ctx.enabled.contraction) {
        (Some((q, k, dist0)), Some(eps_t), true) => Verdict::of(eps_t <= q.powf(k as f64) * dist0 + CONTRACTION_ABS_TOL),
        _ => Verdict::Skip,
    };

    MonitorVerdicts { recursion, lyapunov, lyapunov_lhs, lyapunov_rhs, trajectory, contraction }
}

/// Runs the closed loop for `cfg.steps` steps.
pub fn run_closed_loop(cfg: &ScenarioConfig) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let sys = &cfg.sys;
    let cert = &cfg.cert;
    let m = cfg.horizon;
    let disturbances = sample_disturbance(cfg.seed, &sys.w1_box, &sys.w2_box, cfg.steps)?;
    let bar_h = sup_weight_eigenvalue(cert, m);

    let mut summary = VerdictSummary::default();
    let oracle_on = cfg.oracle_tol.is_some();
    let ledger = cfg.analysis.as_ref().map(|p| uncertified_ledger(cfg.iterations, p));
    let rho_ok = cfg.analysis.as_ref().is_some_and(|p| rho_value(p.eta, p.horizon) < 1.0);
    let mut skip = |enabled: bool, name: &str, reason: Option<&str>| -> bool {
        if !enabled {
            summary.skipped.push(format!("{name}: disabled"));
            return false;
        }
        if let Some(r) = reason {
            summary.skipped.push(format!("{name}: {r}"));
            return false;
        }
        true
    };
    let no_oracle = (!oracle_on).then_some("oracle disabled, eps_t not measured");
    let run_recursion = skip(cfg.monitors.recursion, "recursion", no_oracle.or(cfg.analysis.is_none().then_some("no analysis parameters")));
    let run_lyapunov = skip(cfg.monitors.lyapunov, "lyapunov", no_oracle);
    let run_trajectory = skip(
        cfg.monitors.trajectory,
        "trajectory",
        no_oracle
            .or(cfg.analysis.is_none().then_some("no analysis parameters"))
            .or((!rho_ok).then_some("rho >= 1, the trajectory bounds are undefined")),
    );
    let run_contraction = skip(cfg.monitors.contraction, "contraction", no_oracle);

    let mut x = cfg.x0.clone();
    let mut u_window: Vec<DVector<f64>> = Vec::new();
    let mut y_window: Vec<DVector<f64>> = Vec::new();
    let mut filtered: Vec<DVector<f64>> = Vec::with_capacity(cfg.steps);
    let mut states: Vec<DVector<f64>> = Vec::with_capacity(cfg.steps);
    let mut z_prev: Option<DVector<f64>> = None;
    let mut hist = MonitorHistory::default();
    let mut rows = Vec::with_capacity(cfg.steps);

    for t in 0..cfg.steps {
        let m_t = effective_horizon(m, t);
        let prior = if t == 0 { cfg.x_prior0.clone() } else { filtered[t - m_t].clone() };
        let problem = build_problem(sys, cert, &prior, &u_window, &y_window, m, t)?;
        let z0 = match &z_prev {
            None => cfg.z0.clone(),
            Some(z) => sigma_lift(z, t, m, problem.dims)?,
        };
        let warm_start_dim = z0.len();
        let report = solve_fixed_iters(&problem, &z0, cfg.iterations, cfg.step_rule)?;
        let z_k = report.z_k.z.clone();
        let z_star = match cfg.oracle_tol {
            Some(tol) => Some(solve_oracle(&problem, tol)?.z),
            None => None,
        };
        let eps = z_star.as_ref().map(|zs| (&z_k - zs).norm());

        let x_hat = extract_estimate(&problem, &z_k)?.pop().expect("estimate window is never empty");
        let e = &x_hat - &x;
        let w = &disturbances[t];
        let sigma = residual_sigma(t, m, &problem.weight, sys, cert.eta);
        let w_delta_now = w_delta(cert, &x_hat, &x)?;

        let anchor_w_delta = if t == 0 { w_delta_now } else { w_delta(cert, &filtered[t - m_t], &states[t - m_t])? };
        let ctx = StepContext {
            t,
            window: m_t,
            eta: cert.eta,
            noise_weight: &cert.q,
            bar_h,
            eps,
            e_norm: e.norm(),
            w_delta: w_delta_now,
            anchor_w_delta,
            recent_w: &disturbances[t - m_t..t],
            history: &hist,
            ledger: ledger.as_ref(),
            l_phi: cfg.analysis.as_ref().map_or(f64::NAN, |p| p.l_phi),
            contraction: z_star.as_ref().map(|zs| (report.contraction_base, cfg.iterations, (&z0 - zs).norm())),
            enabled: EnabledMonitors {
                recursion: run_recursion,
                lyapunov: run_lyapunov,
                trajectory: run_trajectory,
                contraction: run_contraction,
            },
        };
        let monitors = monitor_step(&ctx);
        for (name, v) in monitors.named() {
            if v == Verdict::Fail && summary.first_failure.is_none() {
                summary.first_failure = Some((t, name.to_string()));
            }
        }
        summary.recursion.add(monitors.recursion);
        summary.lyapunov.add(monitors.lyapunov);
        summary.trajectory.add(monitors.trajectory);
        summary.contraction.add(monitors.contraction);
        if cfg.strict {
            if let Some((step, monitor)) = summary.first_failure.clone() {
                return Err(Error::MonitorViolation { step, monitor });
            }
        }

        // Apply the control and advance the plant.
        let u = evaluate(&cfg.law, &x_hat)?;
        let y = sys.output(&x, &w.w2);
        let w2_feasible = (0..problem.horizon).all(|i| sys.w2_box.contains(&problem.disturbance_block(&z_k, i).rows(sys.nx(), sys.ny()).into_owned()));
        let coupled_feasible = problem.coupled_constraints_hold(&z_k)?;

        rows.push(TrajectoryRow {
            t,
            x: x.iter().copied().collect(),
            y: y.iter().copied().collect(),
            u: u.iter().copied().collect(),
            x_hat: x_hat.iter().copied().collect(),
            e_norm: e.norm(),
            eps,
            w_delta: w_delta_now,
            sigma,
            w2_feasible,
            coupled_feasible,
            warm_start_dim,
            problem_dim: problem.dim_z(),
            z_k: z_k.clone(),
            monitors,
        });

        hist.x_norm.push(x.norm());
        hist.e_norm.push(e.norm());
        hist.w_norm.push(w.stacked().norm());
        hist.eps.push(eps.unwrap_or(f64::NAN));
        hist.sigma.push(sigma.clamped);

        filtered.push(x_hat);
        states.push(x.clone());
        u_window = shift_window(&u_window, u.clone(), t, m);
        y_window = shift_window(&y_window, y, t, m);
        z_prev = Some(z_k);
        x = sys.step(&x, &u, &w.w1);
        let norm = x.norm();
        if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
            return Err(Error::DivergentTrajectory { step: t + 1, norm });
        }
    }

    Ok(TrajectoryLog {
        header: LogHeader {
            prng: PRNG_NAME.to_string(),
            seed: cfg.seed,
            config_hash: None,
            horizon: m,
            iterations: cfg.iterations,
            steps: cfg.steps,
            step_rule: cfg.step_rule,
            oracle_tol: cfg.oracle_tol,
        },
        rows,
        ledger,
        summary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub trials: usize,
    pub seed: u64,
    /// Initial plant states are drawn from `[−r, r]ⁿ`.
    pub state_radius: f64,
    /// Priors are the true state plus a draw from `[−r, r]ⁿ`.
    pub prior_radius: f64,
    /// Also sample growing-window pairs `t ≤ M`.
    pub include_growing: bool,
    pub oracle_tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            trials: 500,
            seed: 0,
            state_radius: 10.0,
            prior_radius: 5.0,
            include_growing: true,
            oracle_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub l_phi: f64,
    pub ratios: Vec<f64>,
    pub skipped: usize,
}

/// One sampled pair of consecutive problems.
struct ProbePair {
    first: MheProblem,
    second: MheProblem,
}

/// States, inputs and outputs of one sampled open-loop window.
type Window = (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>);

fn sample_window(sys: &LtiSystem, rng: &mut crate::sampling::Prng, x_start: &DVector<f64>, len: usize) -> Window {
    let u_box = if sys.u_box.is_bounded() { sys.u_box.clone() } else { BoxSet(sys.u_box.0.iter().map(|iv| crate::model::Interval::new(iv.lower.max(-1.0), iv.upper.min(1.0))).collect()) };
    let mut x = x_start.clone();
    let (mut xs, mut us, mut ys) = (vec![x.clone()], Vec::new(), Vec::new());
    for _ in 0..len {
        let u = uniform_in_box(rng, &u_box);
        let w1 = uniform_in_box(rng, &sys.w1_box);
        let w2 = uniform_in_box(rng, &sys.w2_box);
        ys.push(sys.output(&x, &w2));
        x = sys.step(&x, &u, &w1);
        us.push(u);
        xs.push(x.clone());
    }
    (xs, us, ys)
}

/// Empirical Lipschitz constant of the optimal-solution map across
/// consecutive problems: the largest
/// `‖Σz*₁ − z*₂‖ / (‖z̃₁ − Σᵀz̃₂‖ + σ)` over sampled pairs, floored at
/// `1 + 1e−9`. Pairs with a vanishing denominator are skipped.
pub fn lemma1_probe(sys: &LtiSystem, cert: &IossCertificate, horizon: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if horizon < 1 {
        return Err(Error::InvalidParameter {
            name: "M".into(),
            reason: "horizon must be at least 1".into(),
        });
    }
    require_bounded(&sys.w1_box, "w1_box")?;
    require_bounded(&sys.w2_box, "w2_box")?;
    let mut rng = seeded(cfg.seed);
    let nx = sys.nx();
    let mut ratios = Vec::with_capacity(cfg.trials);
    let mut skipped = 0;

    for trial in 0..cfg.trials {
        let growing = cfg.include_growing && trial % 2 == 1;
        let x_start = uniform_cube(&mut rng, nx, cfg.state_radius);
        let (pair, sigma) = if growing {
            let t2 = 1 + (trial / 2) % horizon;
            let t1 = t2 - 1;
            let (xs, us, ys) = sample_window(sys, &mut rng, &x_start, t2);
            let prior2 = &xs[0] + uniform_cube(&mut rng, nx, cfg.prior_radius);
            // At t = 1 the first problem still holds the initial prior.
            let prior1 = if t1 == 0 { &xs[0] + uniform_cube(&mut rng, nx, cfg.prior_radius) } else { prior2.clone() };
            let first = build_problem(sys, cert, &prior1, &us[..t1], &ys[..t1], horizon, t1)?;
            let second = build_problem(sys, cert, &prior2, &us, &ys, horizon, t2)?;
            let sigma = residual_sigma(t2, horizon, &second.weight, sys, cert.eta).clamped;
            (ProbePair { first, second }, sigma)
        } else {
            let (xs, us, ys) = sample_window(sys, &mut rng, &x_start, horizon + 1);
            let prior1 = &xs[0] + uniform_cube(&mut rng, nx, cfg.prior_radius);
            let prior2 = &xs[1] + uniform_cube(&mut rng, nx, cfg.prior_radius);
            let first = build_problem(sys, cert, &prior1, &us[..horizon], &ys[..horizon], horizon, horizon + 1)?;
            let second = build_problem(sys, cert, &prior2, &us[1..], &ys[1..], horizon, horizon + 2)?;
            (ProbePair { first, second }, 0.0)
        };

        let z1 = solve_oracle(&pair.first, cfg.oracle_tol)?.z;
        let z2 = solve_oracle(&pair.second, cfg.oracle_tol)?.z;
        let n1 = z1.len();
        let lifted = if n1 < z2.len() { sigma_lift(&z1, pair.second.t, horizon, pair.second.dims)? } else { z1 };
        let numerator = (&lifted - &z2).norm();
        let ref_gap = (&pair.first.reference - pair.second.reference.rows(0, n1)).norm();
        let denominator = ref_gap + sigma;
        if denominator <= 1e-12 {
            skipped += 1;
            continue;
        }
        ratios.push(numerator / denominator);
    }

    if ratios.is_empty() {
        return Err(Error::DegenerateDenominator);
    }
    let l_phi = ratios.iter().copied().fold(1.0 + 1e-9, f64::max);
    Ok(ProbeResult { l_phi, ratios, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Interval;

    #[test]
    fn degenerate_box_gives_zeros() {
        let b = BoxSet(vec![Interval::new(0.0, 0.0); 2]);
        let w = sample_disturbance(3, &b, &BoxSet(vec![Interval::new(0.0, 0.0)]), 5).unwrap();
        assert!(w.iter().all(|d| d.stacked().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn same_seed_same_sequence() {
        let b = BoxSet(vec![Interval::symmetric(0.1); 3]);
        let a = sample_disturbance(11, &b, &b, 20).unwrap();
        let c = sample_disturbance(11, &b, &b, 20).unwrap();
        assert_eq!(a, c);
        assert_ne!(a, sample_disturbance(12, &b, &b, 20).unwrap());
    }

    #[test]
    fn uniform_mean_bound() {
        let b = BoxSet(vec![Interval::symmetric(0.1)]);
        let n = 10_000;
        let w = sample_disturbance(5, &b, &b, n).unwrap();
        let mean: f64 = w.iter().map(|d| d.w1[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * 0.1 / (3.0 * n as f64).sqrt());
        assert!(w.iter().all(|d| d.w1[0].abs() <= 0.1 && d.w2[0].abs() <= 0.1));
    }

    #[test]
    fn unbounded_box_rejected() {
        let b = BoxSet::unbounded(1);
        assert!(matches!(sample_disturbance(0, &b, &b, 3), Err(Error::UnboundedSampleBox { .. })));
    }

    #[test]
    fn monitor_step_hand_values() {
        let q = DMatrix::identity(2, 2);
        let w = vec![
            AugmentedDisturbance { w1: DVector::from_vec(vec![1.0]), w2: DVector::from_vec(vec![0.0]) },
            AugmentedDisturbance { w1: DVector::from_vec(vec![0.0]), w2: DVector::from_vec(vec![2.0]) },
        ];
        let hist = MonitorHistory::default();
        let mut ctx = StepContext {
            t: 2,
            window: 2,
            eta: 0.5,
            noise_weight: &q,
            bar_h: 3.0,
            eps: Some(0.1),
            e_norm: 1.0,
            w_delta: 0.0,
            anchor_w_delta: 4.0,
            recent_w: &w,
            history: &hist,
            ledger: None,
            l_phi: f64::NAN,
            contraction: Some((0.5, 2, 1.0)),
            enabled: EnabledMonitors { recursion: true, lyapunov: true, trajectory: true, contraction: true },
        };
        // 6·0.25·4 + 2·3·0.01 + 6·(4 + 0.5·1)
        let v = monitor_step(&ctx);
        assert!((v.lyapunov_rhs - 33.06).abs() < 1e-12);
        assert_eq!(v.lyapunov, Verdict::Pass);
        assert_eq!(v.contraction, Verdict::Pass);
        assert_eq!(v.recursion, Verdict::Skip);
        assert_eq!(v.trajectory, Verdict::Skip);

        ctx.w_delta = 34.0;
        ctx.eps = Some(0.3);
        let v = monitor_step(&ctx);
        assert_eq!(v.lyapunov, Verdict::Fail);
        assert_eq!(v.contraction, Verdict::Fail);
    }
}
