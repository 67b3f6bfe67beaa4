//! Command-line surface: `certify`, `analyze-k`, `simulate` and `verify`.
//!
//! Exit codes are 0 on success, 1 on a domain failure and 2 on a usage or
//! configuration error. Errors go to stderr as one JSON object.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;

use crate::analysis::{compute_rho, min_contracting_horizon, min_iterations, rho_value, small_gain_check, sup_phi_base, AnalysisParams, GainLedger};
use crate::config::{load_config, parse_config, ConfigDocument, IterationSpec, LPhiSpec};
use crate::controller::{estimate_closed_loop_gain, estimate_lipschitz, stability_smoke_test, FeedbackLaw};
use crate::error::{Error, Result};
use crate::harness::{lemma1_probe, run_closed_loop, MonitorToggles, ProbeConfig, ScenarioConfig, TrajectoryLog, Verdict};
use crate::mhe::{build_problem, effective_horizon, sigma_lift, Dims};
use crate::model::{dissipation_sample, validate_system, AugmentedDisturbance, BoxSet, Interval, IossCertificate, LmiVerdict, LtiSystem};
use crate::sampling::{seeded, uniform_cube, uniform_in_box, PRNG_NAME};
use crate::solver::{solve_fixed_iters, solve_oracle};

#[derive(Debug, Parser)]
#[command(name = "submhe", version, about = "Sub-optimal MHE in closed loop: certificates, iteration budgets and monitored simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Verify the configured IOSS certificate, or search for one.
    Certify(CommonArgs),
    /// Evaluate the gain ledger and the smallest certified K.
    AnalyzeK(CommonArgs),
    /// Run the closed loop and write the trajectory CSV and summary JSON.
    Simulate(CommonArgs),
    /// Run the invariant checks on the loaded config at small scale.
    Verify(CommonArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
    #[arg(long, value_name = "K")]
    pub iters: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Abort on the first monitor violation.
    #[arg(long)]
    pub strict: bool,
    /// Simulate even when the small-gain analysis does not certify the run.
    #[arg(long)]
    pub uncertified: bool,
    #[arg(long, value_enum, value_name = "on|off")]
    pub oracle: Option<Toggle>,
}

/// Loads the config and applies the command-line overrides. The result is
/// re-validated so overrides obey the same rules as the file.
pub fn effective_config(args: &CommonArgs) -> Result<ConfigDocument> {
    let mut doc = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        doc.scenario.seed = Some(seed);
    }
    if let Some(steps) = args.steps {
        doc.scenario.steps = Some(steps);
    }
    if let Some(k) = args.iters {
        doc.mhe.iterations = Some(IterationSpec::Fixed(k));
    }
    if let Some(out) = &args.out {
        doc.output.dir = Some(out.to_string_lossy().into_owned());
    }
    if args.strict {
        doc.scenario.strict = Some(true);
    }
    if let Some(t) = args.oracle {
        doc.scenario.oracle = Some(t == Toggle::On);
    }
    parse_config(&doc.to_canonical_json())
}

/// Where each analysis input came from.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisSources {
    pub phi_base: &'static str,
    pub l_pi: &'static str,
    pub gamma13_slope: &'static str,
    pub l_phi: &'static str,
    pub probe_pairs: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PreparedAnalysis {
    pub params: AnalysisParams,
    pub sources: AnalysisSources,
}

/// Fills every analysis scalar from the config, estimating the ones left
/// open: the solver base from the Hessians, `L_π` and `γ₁,₃` by sampling the
/// controller, `L_Φ` by the solution-map probe.
pub fn prepare_analysis(doc: &ConfigDocument, sys: &LtiSystem, cert: &IossCertificate, law: &FeedbackLaw) -> Result<PreparedAnalysis> {
    let a = &doc.analysis;
    let horizon = doc.horizon();
    let seed = doc.seed();

    let smoke = a.smoke_test.as_ref().expect("validated");
    let radius = smoke.radius.expect("validated");
    stability_smoke_test(sys, law, radius, smoke.horizon.expect("validated"), smoke.trials.expect("validated"), seed, 1e-6 * radius.max(1.0))?;

    let (phi_base, phi_src) = match doc.mhe.phi_base {
        Some(q) => (q, "config"),
        None => (sup_phi_base(sys, cert, horizon, doc.step_rule())?, "hessian"),
    };
    let (l_pi, l_pi_src) = match doc.controller.l_pi {
        Some(l) => (l, "config"),
        None => {
            let r = a.lipschitz_radius.expect("validated");
            let domain = BoxSet::uniform(sys.nx(), Interval::symmetric(r));
            (estimate_lipschitz(law, &domain, a.lipschitz_samples.expect("validated"), seed)?.value, "sampled")
        }
    };
    let (gamma13, gamma_src) = match doc.controller.gamma13_slope {
        Some(g) => (g, "config"),
        None => {
            let mags = a.gamma13_magnitudes.as_ref().expect("validated");
            (estimate_closed_loop_gain(sys, law, a.gamma13_horizon.expect("validated"), mags, seed)?.slope, "heuristic")
        }
    };
    let (l_phi, l_phi_src, pairs) = match a.l_phi.expect("validated") {
        LPhiSpec::Config { config } => (config, "config", None),
        LPhiSpec::Probe(_) => {
            let probe = lemma1_probe(sys, cert, horizon, &doc.probe_config())?;
            (probe.l_phi, "probe", Some(probe.ratios.len()))
        }
    };
    let params = AnalysisParams::from_certificate(sys, cert, horizon, phi_base, l_phi, l_pi, gamma13)?;
    Ok(PreparedAnalysis {
        params,
        sources: AnalysisSources {
            phi_base: phi_src,
            l_pi: l_pi_src,
            gamma13_slope: gamma_src,
            l_phi: l_phi_src,
            probe_pairs: pairs,
        },
    })
}

/// Certification outcome of a run at a given `K`.
#[derive(Debug, Clone, Serialize)]
pub struct Certification {
    pub certified: bool,
    /// Error name and message when not certified.
    pub reason: Option<String>,
}

fn certify_run(lmi: &LmiVerdict, analysis: &Result<PreparedAnalysis>, k: usize) -> Certification {
    let failure = if !lmi.pass {
        Some(format!("LmiViolation: max eigenvalue {:e} exceeds tol {:e}", lmi.max_eigenvalue, lmi.tol))
    } else {
        match analysis {
            Err(e) => Some(format!("{}: {e}", e.name())),
            Ok(prep) => match small_gain_check(k, &prep.params) {
                Err(e) => Some(format!("{}: {e}", e.name())),
                Ok(ledger) if !ledger.verdict.pass => {
                    let e = Error::SmallGainViolated {
                        k,
                        margin: ledger.verdict.worst_margin(),
                    };
                    Some(format!("{}: {e}", e.name()))
                }
                Ok(_) => None,
            },
        }
    };
    Certification {
        certified: failure.is_none(),
        reason: failure,
    }
}

/// A failure reported by the CLI.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub body: serde_json::Value,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let mut body = json!({ "error": e.name(), "message": e.to_string() });
        match &e {
            Error::Parse { path, .. } | Error::Validation { path, .. } | Error::Io { path, .. } => {
                body["path"] = json!(path);
            }
            Error::ContractionViolated { min_horizon, .. } => {
                body["min_horizon"] = json!(min_horizon);
                body["path"] = json!("mhe.M");
            }
            Error::NotFoundBelowCap { best_k, .. } => {
                body["best_k"] = json!(best_k);
                body["path"] = json!("analysis.K_max");
            }
            _ => {}
        }
        let code = match e {
            Error::Parse { .. } | Error::Validation { .. } | Error::Io { .. } => 2,
            _ => 1,
        };
        CliError { code, body }
    }
}

fn domain_failure(name: &str, message: impl Into<String>, path: Option<&str>) -> CliError {
    let mut body = json!({ "error": name, "message": message.into() });
    if let Some(p) = path {
        body["path"] = json!(p);
    }
    CliError { code: 1, body }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.display().to_string(),
            message: e.to_string(),
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn run_certify(doc: &ConfigDocument) -> std::result::Result<serde_json::Value, CliError> {
    let sys = validate_system(doc.system())?;
    let (cert, verdict) = doc.certificate(&sys)?;
    let p: Vec<Vec<f64>> = cert.p.row_iter().map(|r| r.iter().copied().collect()).collect();
    let out = json!({
        "pass": verdict.pass,
        "max_eigenvalue": verdict.max_eigenvalue,
        "tol": verdict.tol,
        "searched": doc.certificate_is_search(),
        "eta": cert.eta,
        "P": p,
    });
    if !verdict.pass {
        return Err(domain_failure(
            "LmiViolation",
            format!("LMI max eigenvalue {:e} exceeds tol {:e}", verdict.max_eigenvalue, verdict.tol),
            Some("certificate.P"),
        ));
    }
    Ok(out)
}

fn run_analyze(doc: &ConfigDocument) -> std::result::Result<serde_json::Value, CliError> {
    let sys = validate_system(doc.system())?;
    let horizon = doc.horizon();
    let eta = doc.certificate.eta.expect("validated");
    // Fail fast on ρ before any sampling.
    compute_rho(eta, horizon)?;
    let (cert, verdict) = doc.certificate(&sys)?;
    if !verdict.pass {
        return Err(domain_failure("LmiViolation", format!("LMI max eigenvalue {:e} exceeds tol {:e}", verdict.max_eigenvalue, verdict.tol), Some("certificate.P")));
    }
    let law = doc.feedback_law(&sys)?;
    let prep = prepare_analysis(doc, &sys, &cert, &law)?;
    let k_max = doc.analysis.k_max.expect("validated");
    let ledger = min_iterations(&prep.params, k_max)?;
    let at_config = doc.fixed_iterations().map(|k| small_gain_check(k, &prep.params)).transpose()?;
    Ok(json!({
        "config_hash": doc.hash(),
        "params": prep.params,
        "sources": prep.sources,
        "k_star": ledger.k,
        "ledger": ledger,
        "configured_k": at_config,
    }))
}

/// Everything `simulate` produces.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub config_hash: String,
    pub prng: &'static str,
    pub seed: u64,
    pub iterations: usize,
    pub certification: Certification,
    pub analysis: Option<PreparedAnalysis>,
    pub ledger: Option<GainLedger>,
    pub verdicts: crate::harness::VerdictSummary,
    pub csv: String,
}

/// Runs `simulate` on an effective config and returns the log and summary
/// without writing files.
pub fn simulate(doc: &ConfigDocument, allow_uncertified: bool) -> Result<(TrajectoryLog, SimulationSummary)> {
    let sys = validate_system(doc.system())?;
    let (cert, lmi) = doc.certificate(&sys)?;
    let law = doc.feedback_law(&sys)?;
    let analysis = prepare_analysis(doc, &sys, &cert, &law);

    let iterations = match doc.fixed_iterations() {
        Some(k) => k,
        None => {
            let prep = analysis.as_ref().map_err(Clone::clone)?;
            min_iterations(&prep.params, doc.analysis.k_max.expect("validated"))?.k
        }
    };
    let certification = certify_run(&lmi, &analysis, iterations);
    if !certification.certified && !allow_uncertified {
        return Err(match &analysis {
            Err(e) => e.clone(),
            Ok(prep) => match small_gain_check(iterations, &prep.params) {
                Err(e) => e,
                Ok(l) if lmi.pass => Error::SmallGainViolated {
                    k: iterations,
                    margin: l.verdict.worst_margin(),
                },
                Ok(_) => Error::Validation {
                    path: "certificate.P".into(),
                    reason: certification.reason.clone().unwrap_or_default(),
                },
            },
        });
    }
    let prepared = analysis.ok();
    let cfg = ScenarioConfig {
        sys,
        cert,
        law,
        horizon: doc.horizon(),
        iterations,
        steps: doc.steps(),
        x0: doc.x0(),
        x_prior0: doc.prior(),
        z0: doc.z0(),
        seed: doc.seed(),
        monitors: doc.monitors(),
        oracle_tol: doc.oracle_tol(),
        step_rule: doc.step_rule(),
        analysis: prepared.as_ref().map(|p| p.params),
        strict: doc.strict(),
    };
    let mut log = run_closed_loop(&cfg)?;
    let hash = doc.hash();
    log.header.config_hash = Some(hash.clone());
    let summary = SimulationSummary {
        config_hash: hash,
        prng: PRNG_NAME,
        seed: doc.seed(),
        iterations,
        certification,
        analysis: prepared,
        ledger: log.ledger,
        verdicts: log.summary.clone(),
        csv: doc.output.csv.clone().expect("validated"),
    };
    Ok((log, summary))
}

fn run_simulate(doc: &ConfigDocument, allow_uncertified: bool) -> std::result::Result<serde_json::Value, CliError> {
    let (log, summary) = simulate(doc, allow_uncertified)?;
    let dir = PathBuf::from(doc.output.dir.as_ref().expect("validated"));
    let csv_path = dir.join(doc.output.csv.as_ref().expect("validated"));
    let json_path = dir.join(doc.output.json.as_ref().expect("validated"));
    write_file(&csv_path, &log.to_csv())?;
    write_file(&json_path, &pretty(&summary))?;
    Ok(json!({
        "csv": csv_path.display().to_string(),
        "summary": json_path.display().to_string(),
        "rows": log.rows.len(),
        "iterations": summary.iterations,
        "certified": summary.certification.certified,
        "all_monitors_pass": summary.verdicts.all_pass(),
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((pass, detail)) => CheckResult { name, pass, detail },
        Err(e) => CheckResult {
            name,
            pass: false,
            detail: format!("{}: {e}", e.name()),
        },
    }
}

fn random_window(sys: &LtiSystem, rng: &mut crate::sampling::Prng, len: usize) -> (DVector<f64>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let bounded = |b: &BoxSet| BoxSet(b.0.iter().map(|iv| Interval::new(iv.lower.max(-1.0), iv.upper.min(1.0))).collect());
    let (u_box, w1_box, w2_box) = (bounded(&sys.u_box), bounded(&sys.w1_box), bounded(&sys.w2_box));
    let mut x = uniform_cube(rng, sys.nx(), 5.0);
    let x_prior = &x + uniform_cube(rng, sys.nx(), 1.0);
    let (mut us, mut ys) = (Vec::new(), Vec::new());
    for _ in 0..len {
        let u = uniform_in_box(rng, &u_box);
        ys.push(sys.output(&x, &uniform_in_box(rng, &w2_box)));
        x = sys.step(&x, &u, &uniform_in_box(rng, &w1_box));
        us.push(u);
    }
    (x_prior, us, ys)
}

/// Small-scale invariant suite on the loaded config.
pub fn verify_config(doc: &ConfigDocument) -> Result<Vec<CheckResult>> {
    let sys = validate_system(doc.system())?;
    let (cert, lmi) = doc.certificate(&sys)?;
    let law = doc.feedback_law(&sys)?;
    let horizon = doc.horizon();
    let rule = doc.step_rule();
    let oracle_tol = doc.scenario.oracle_tol.expect("validated");
    let seed = doc.seed();
    let dims = Dims::of(&sys);
    let mut out = Vec::new();

    out.push(check("config_round_trip", {
        let again = parse_config(&doc.to_canonical_json());
        again.map(|d| (d == *doc, "re-serialized config reloads identically".to_string()))
    }));

    out.push(CheckResult {
        name: "ioss_lmi",
        pass: lmi.pass,
        detail: format!("max eigenvalue {:e}, tol {:e}", lmi.max_eigenvalue, lmi.tol),
    });

    out.push(check("dissipation", (|| {
        let mut rng = seeded(seed);
        let mut worst: f64 = f64::NEG_INFINITY;
        let n = 200;
        for _ in 0..n {
            let x = uniform_cube(&mut rng, sys.nx(), 5.0);
            let x2 = uniform_cube(&mut rng, sys.nx(), 5.0);
            let u = uniform_cube(&mut rng, sys.nu(), 1.0);
            let w = AugmentedDisturbance {
                w1: uniform_cube(&mut rng, sys.nx(), 1.0),
                w2: uniform_cube(&mut rng, sys.ny(), 1.0),
            };
            let w2 = AugmentedDisturbance {
                w1: uniform_cube(&mut rng, sys.nx(), 1.0),
                w2: uniform_cube(&mut rng, sys.ny(), 1.0),
            };
            let s = dissipation_sample(&sys, &cert, &x, &x2, &u, &w, &w2)?;
            if !s.holds(1e-9) {
                return Ok((false, format!("violated: lhs {:e} > rhs {:e}", s.lhs, s.rhs)));
            }
            worst = worst.max(s.lhs - s.rhs);
        }
        Ok((true, format!("{n} pairs, max lhs − rhs {worst:e}")))
    })()));

    out.push(check("solver_contraction", (|| {
        let mut rng = seeded(seed.wrapping_add(1));
        let mut count = 0;
        for t in 0..=horizon + 1 {
            let (x_prior, us, ys) = random_window(&sys, &mut rng, effective_horizon(horizon, t));
            let problem = build_problem(&sys, &cert, &x_prior, &us, &ys, horizon, t)?;
            let star = solve_oracle(&problem, oracle_tol)?.z;
            let z0 = problem.lift_point(&DVector::zeros(problem.dim_v())).z + uniform_cube(&mut rng, problem.dim_z(), 3.0);
            for k in [1usize, 5, 20] {
                let rep = solve_fixed_iters(&problem, &z0, k, rule)?;
                let lhs = (&rep.z_k.z - &star).norm();
                let rhs = rep.contraction_base.powi(k as i32) * (&z0 - &star).norm() + 1e-9;
                if lhs > rhs {
                    return Ok((false, format!("t = {t}, K = {k}: {lhs:e} > {rhs:e}")));
                }
                count += 1;
            }
        }
        Ok((true, format!("{count} (problem, K) cases")))
    })()));

    out.push(check("warm_start_dims", (|| {
        let mut z = DVector::from_element(dims.dim_z(0), 1.0);
        for t in 1..=2 * horizon {
            let lifted = sigma_lift(&z, t, horizon, dims)?;
            let expected = dims.dim_z(effective_horizon(horizon, t));
            let sq = |v: &DVector<f64>| v.iter().fold(0.0, |acc, x| acc + x * x);
            if lifted.len() != expected || sq(&lifted) != sq(&z) {
                return Ok((false, format!("t = {t}: dim {} vs {expected}", lifted.len())));
            }
            z = lifted.map(|v| v + 0.5);
        }
        Ok((true, format!("t = 1..={}", 2 * horizon)))
    })()));

    let rho = rho_value(cert.eta, horizon);
    out.push(CheckResult {
        name: "rho_contraction",
        pass: true,
        detail: if rho < 1.0 {
            format!("rho = {rho}")
        } else {
            format!("rho = {rho} >= 1 (informational); smallest contracting M = {}", min_contracting_horizon(cert.eta))
        },
    });

    out.push(check("solution_map_probe", (|| {
        let cfg = ProbeConfig {
            trials: 50,
            ..doc.probe_config()
        };
        let r = lemma1_probe(&sys, &cert, horizon, &cfg)?;
        let ok = r.l_phi.is_finite() && r.l_phi >= 1.0 && r.ratios.iter().all(|x| *x <= r.l_phi);
        Ok((ok, format!("L_Phi = {} over {} pairs", r.l_phi, r.ratios.len())))
    })()));

    out.push(check("lyapunov_monitor", (|| {
        let cfg = ScenarioConfig {
            sys: sys.clone(),
            cert: cert.clone(),
            law: law.clone(),
            horizon,
            iterations: doc.fixed_iterations().unwrap_or(20),
            steps: 2 * horizon + 2,
            x0: doc.x0(),
            x_prior0: doc.prior(),
            z0: doc.z0(),
            seed,
            monitors: MonitorToggles {
                recursion: false,
                lyapunov: true,
                trajectory: false,
                contraction: true,
            },
            oracle_tol: Some(oracle_tol),
            step_rule: rule,
            analysis: None,
            strict: false,
        };
        let log = run_closed_loop(&cfg)?;
        let bad = log.rows.iter().find(|r| r.monitors.lyapunov == Verdict::Fail || r.monitors.contraction == Verdict::Fail);
        Ok(match bad {
            Some(r) => (false, format!("violation at t = {}", r.t)),
            None => (true, format!("{} steps", log.rows.len())),
        })
    })()));

    Ok(out)
}

fn run_verify(doc: &ConfigDocument) -> std::result::Result<serde_json::Value, CliError> {
    let checks = verify_config(doc)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    let report = json!({ "pass": failed.is_empty(), "checks": checks });
    if !failed.is_empty() {
        let mut err = domain_failure("VerificationFailed", format!("failed checks: {}", failed.join(", ")), None);
        err.body["report"] = report;
        return Err(err);
    }
    Ok(report)
}

fn dispatch(cli: &Cli) -> std::result::Result<serde_json::Value, CliError> {
    match &cli.command {
        Command::Certify(args) => run_certify(&effective_config(args)?),
        Command::AnalyzeK(args) => run_analyze(&effective_config(args)?),
        Command::Simulate(args) => run_simulate(&effective_config(args)?, args.uncertified),
        Command::Verify(args) => run_verify(&effective_config(args)?),
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run_cli<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = write!(stdout, "{e}");
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
            }
            let body = json!({ "error": "UsageError", "message": e.to_string().trim() });
            let _ = writeln!(stderr, "{body}");
            return 2;
        }
    };
    match dispatch(&cli) {
        Ok(value) => {
            let _ = write!(stdout, "{}", pretty(&value));
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", e.body);
            e.code
        }
    }
}
