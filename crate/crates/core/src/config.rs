//! JSON configuration: parsing with field-path errors, validation, default
//! filling, and conversion into the runtime types.
//!
//! Loading fills every default explicitly, so a loaded document serialized
//! and loaded again is identical.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::controller::{lqr_gain, FeedbackLaw};
use crate::error::{Error, Result};
use crate::harness::{MonitorToggles, ProbeConfig};
use crate::model::{find_certificate, validate_system, verify_ioss_lmi, BoxSet, CertificateSearch, Interval, IossCertificate, LmiVerdict, LtiSystem};
use crate::solver::StepRule;

pub const SCHEMA_VERSION: u32 = 1;

/// Interval end point; JSON has no infinities, so they are spelled
/// `"inf"` / `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound(pub f64);

impl Serialize for Bound {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else if self.0 == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Bound {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Bound(v)),
            Raw::Str(s) => match s.as_str() {
                "inf" | "+inf" => Ok(Bound(f64::INFINITY)),
                "-inf" => Ok(Bound(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!("expected a number, \"inf\" or \"-inf\", found {other:?}"))),
            },
        }
    }
}

pub type Matrix = Vec<Vec<f64>>;
pub type BoxSpec = Vec<[Bound; 2]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixOrDirective {
    Matrix(Matrix),
    Directive(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IterationSpec {
    Fixed(usize),
    Auto(AutoKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LPhiSpec {
    Config { config: f64 },
    Probe(ProbeKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKeyword {
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub schema_version: u32,
    pub system: SystemBlock,
    pub certificate: CertificateBlock,
    pub controller: ControllerBlock,
    pub mhe: MheBlock,
    pub scenario: ScenarioBlock,
    #[serde(default)]
    pub analysis: AnalysisBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    #[serde(rename = "A")]
    pub a: Option<Matrix>,
    #[serde(rename = "B")]
    pub b: Option<Matrix>,
    #[serde(rename = "C")]
    pub c: Option<Matrix>,
    #[serde(default)]
    pub x_box: Option<BoxSpec>,
    #[serde(default)]
    pub y_box: Option<BoxSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateBlock {
    /// A matrix, or `"search"`.
    #[serde(rename = "P")]
    pub p: Option<MatrixOrDirective>,
    #[serde(rename = "Q")]
    pub q: Option<Matrix>,
    #[serde(rename = "R")]
    pub r: Option<Matrix>,
    pub eta: Option<f64>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub search: Option<SearchBlock>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBlock {
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default)]
    pub min_eig_floor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerBlock {
    /// A matrix, or `"lqr"` for the LQR gain with identity weights.
    pub gain: Option<MatrixOrDirective>,
    #[serde(default)]
    pub u_box: Option<BoxSpec>,
    /// Estimated by sampling when absent.
    #[serde(default, rename = "L_pi")]
    pub l_pi: Option<f64>,
    /// Estimated heuristically when absent.
    #[serde(default)]
    pub gamma13_slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MheBlock {
    #[serde(rename = "M")]
    pub horizon: Option<usize>,
    #[serde(default, rename = "K")]
    pub iterations: Option<IterationSpec>,
    /// Overrides the computed solver contraction base.
    #[serde(default)]
    pub phi_base: Option<f64>,
    #[serde(default)]
    pub step_rule: Option<StepRule>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceBlock {
    pub w1_box: Option<BoxSpec>,
    pub w2_box: Option<BoxSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorBlock {
    pub recursion: bool,
    pub lyapunov: bool,
    pub trajectory: bool,
    pub contraction: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioBlock {
    pub x0: Option<Vec<f64>>,
    pub prior: Option<Vec<f64>>,
    /// Warm start of the first problem; defaults to the prior.
    #[serde(default)]
    pub z0: Option<Vec<f64>>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub disturbance: Option<DisturbanceBlock>,
    #[serde(default)]
    pub oracle: Option<bool>,
    #[serde(default)]
    pub oracle_tol: Option<f64>,
    #[serde(default)]
    pub monitors: Option<MonitorBlock>,
    #[serde(default)]
    pub strict: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeBlock {
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub state_radius: Option<f64>,
    #[serde(default)]
    pub prior_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmokeTestBlock {
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisBlock {
    #[serde(default, rename = "K_max")]
    pub k_max: Option<usize>,
    #[serde(default, rename = "L_Phi")]
    pub l_phi: Option<LPhiSpec>,
    #[serde(default)]
    pub probe: Option<ProbeBlock>,
    #[serde(default)]
    pub lipschitz_samples: Option<usize>,
    #[serde(default)]
    pub lipschitz_radius: Option<f64>,
    #[serde(default)]
    pub gamma13_magnitudes: Option<Vec<f64>>,
    #[serde(default)]
    pub gamma13_horizon: Option<usize>,
    #[serde(default)]
    pub smoke_test: Option<SmokeTestBlock>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default)]
    pub dir: Option<String>,
    #[serde(default)]
    pub csv: Option<String>,
    #[serde(default)]
    pub json: Option<String>,
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Validation {
        path: path.into(),
        reason: reason.into(),
    }
}

fn required<'a, T>(v: &'a Option<T>, path: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| invalid(path, "required field is missing"))
}

fn to_matrix(rows: &Matrix, path: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(invalid(format!("{path}[{i}]"), format!("row has {} entries, expected {ncols}", rows[i].len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid(path, "entries must be finite"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn expect_shape(m: &DMatrix<f64>, rows: usize, cols: usize, path: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(invalid(path, format!("expected {rows}x{cols}, found {}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

fn to_box(spec: &BoxSpec) -> BoxSet {
    BoxSet(spec.iter().map(|[lo, hi]| Interval::new(lo.0, hi.0)).collect())
}

fn unbounded_spec(dim: usize) -> BoxSpec {
    vec![[Bound(f64::NEG_INFINITY), Bound(f64::INFINITY)]; dim]
}

fn to_vector(v: &[f64], dim: usize, path: &str) -> Result<DVector<f64>> {
    if v.len() != dim {
        return Err(invalid(path, format!("expected {dim} entries, found {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid(path, "entries must be finite"));
    }
    Ok(DVector::from_column_slice(v))
}

/// Maps a model error on a box to the config path of that box.
fn box_error(e: Error, path_of: impl Fn(&str) -> Option<String>) -> Error {
    match &e {
        Error::BoxExcludesOrigin { which, index, .. } | Error::InvalidBox { which, index, .. } => match path_of(which) {
            Some(p) => invalid(format!("{p}[{index}]"), e.to_string()),
            None => e,
        },
        Error::DimensionMismatch { what, .. } => match path_of(what) {
            Some(p) => invalid(p, e.to_string()),
            None => e,
        },
        _ => e,
    }
}

fn box_path(which: &str) -> Option<String> {
    Some(
        match which {
            "x_box" => "system.x_box",
            "y_box" => "system.y_box",
            "u_box" => "controller.u_box",
            "w1_box" => "scenario.disturbance.w1_box",
            "w2_box" => "scenario.disturbance.w2_box",
            _ => return None,
        }
        .to_string(),
    )
}

/// Parses and validates a document, filling every default.
pub fn parse_config(text: &str) -> Result<ConfigDocument> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut doc: ConfigDocument = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    doc.fill_and_validate()?;
    Ok(doc)
}

pub fn load_config(path: &Path) -> Result<ConfigDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&text)
}

impl ConfigDocument {
    /// Canonical JSON, used for hashing and round-trips.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_json().as_bytes()))
    }

    fn fill_and_validate(&mut self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid("schema_version", format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version)));
        }

        // system
        let a = to_matrix(required(&self.system.a, "system.A")?, "system.A")?;
        let nx = a.nrows();
        if nx == 0 {
            return Err(invalid("system.A", "matrix is empty"));
        }
        expect_shape(&a, nx, nx, "system.A")?;
        let b = to_matrix(required(&self.system.b, "system.B")?, "system.B")?;
        if b.nrows() != nx || b.ncols() == 0 {
            return Err(invalid("system.B", format!("expected {nx} rows and at least one column, found {}x{}", b.nrows(), b.ncols())));
        }
        let nu = b.ncols();
        let c = to_matrix(required(&self.system.c, "system.C")?, "system.C")?;
        if c.ncols() != nx || c.nrows() == 0 {
            return Err(invalid("system.C", format!("expected at least one row of {nx} columns, found {}x{}", c.nrows(), c.ncols())));
        }
        let ny = c.nrows();
        self.system.x_box.get_or_insert_with(|| unbounded_spec(nx));
        self.system.y_box.get_or_insert_with(|| unbounded_spec(ny));
        self.controller.u_box.get_or_insert_with(|| unbounded_spec(nu));
        let dist = required(&self.scenario.disturbance, "scenario.disturbance")?;
        required(&dist.w1_box, "scenario.disturbance.w1_box")?;
        required(&dist.w2_box, "scenario.disturbance.w2_box")?;
        let sys = self.system();
        validate_system(sys.clone()).map_err(|e| box_error(e, box_path))?;

        // certificate
        let cert = &mut self.certificate;
        let eta = *required(&cert.eta, "certificate.eta")?;
        if !(0.0..1.0).contains(&eta) {
            return Err(invalid("certificate.eta", format!("must lie in [0, 1), got {eta}")));
        }
        let tol = *cert.tol.get_or_insert(1e-8);
        if !(tol >= 0.0) {
            return Err(invalid("certificate.tol", "must be nonnegative"));
        }
        let defaults = CertificateSearch::default();
        let search = cert.search.get_or_insert_with(SearchBlock::default);
        search.budget.get_or_insert(defaults.budget);
        let floor = *search.min_eig_floor.get_or_insert(defaults.min_eig_floor);
        if !(floor > 0.0) {
            return Err(invalid("certificate.search.min_eig_floor", "must be positive"));
        }
        let q = to_matrix(required(&cert.q, "certificate.Q")?, "certificate.Q")?;
        expect_shape(&q, nx + ny, nx + ny, "certificate.Q")?;
        let r = to_matrix(required(&cert.r, "certificate.R")?, "certificate.R")?;
        expect_shape(&r, ny, ny, "certificate.R")?;
        let p = match required(&cert.p, "certificate.P")? {
            MatrixOrDirective::Matrix(m) => {
                let p = to_matrix(m, "certificate.P")?;
                expect_shape(&p, nx, nx, "certificate.P")?;
                p
            }
            MatrixOrDirective::Directive(d) if d == "search" => DMatrix::identity(nx, nx),
            MatrixOrDirective::Directive(d) => return Err(invalid("certificate.P", format!("expected a matrix or \"search\", found {d:?}"))),
        };
        IossCertificate::new(p, q, r, eta, tol).map_err(|e| {
            let message = e.to_string();
            match e {
                Error::NotPositiveDefinite { which, .. } | Error::DimensionMismatch { what: which, .. } => {
                    invalid(format!("certificate.{}", which.split(' ').next().unwrap_or("P")), message)
                }
                other => other,
            }
        })?;

        // controller
        match required(&self.controller.gain, "controller.gain")? {
            MatrixOrDirective::Matrix(m) => {
                let k = to_matrix(m, "controller.gain")?;
                expect_shape(&k, nu, nx, "controller.gain")?;
            }
            MatrixOrDirective::Directive(d) if d == "lqr" => {}
            MatrixOrDirective::Directive(d) => return Err(invalid("controller.gain", format!("expected a matrix or \"lqr\", found {d:?}"))),
        }
        if let Some(l) = self.controller.l_pi {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(invalid("controller.L_pi", "must be finite and nonnegative"));
            }
        }
        if let Some(g) = self.controller.gamma13_slope {
            if !(g >= 0.0) || !g.is_finite() {
                return Err(invalid("controller.gamma13_slope", "must be finite and nonnegative"));
            }
        }

        // mhe
        let m = *required(&self.mhe.horizon, "mhe.M")?;
        if m < 1 {
            return Err(invalid("mhe.M", "horizon must be at least 1"));
        }
        self.mhe.iterations.get_or_insert(IterationSpec::Auto(AutoKeyword::Auto));
        if let Some(q) = self.mhe.phi_base {
            if !(q > 0.0 && q < 1.0) {
                return Err(invalid("mhe.phi_base", format!("must lie in (0, 1), got {q}")));
            }
        }
        self.mhe.step_rule.get_or_insert(StepRule::Lifted);

        // scenario
        let sc = &mut self.scenario;
        to_vector(required(&sc.x0, "scenario.x0")?, nx, "scenario.x0")?;
        let prior = required(&sc.prior, "scenario.prior")?.clone();
        to_vector(&prior, nx, "scenario.prior")?;
        to_vector(sc.z0.get_or_insert(prior), nx, "scenario.z0")?;
        if *sc.steps.get_or_insert(40) < 1 {
            return Err(invalid("scenario.steps", "at least one step is required"));
        }
        sc.seed.get_or_insert(0);
        sc.oracle.get_or_insert(true);
        if !(*sc.oracle_tol.get_or_insert(1e-10) > 0.0) {
            return Err(invalid("scenario.oracle_tol", "must be positive"));
        }
        sc.monitors.get_or_insert(MonitorBlock {
            recursion: true,
            lyapunov: true,
            trajectory: true,
            contraction: true,
        });
        sc.strict.get_or_insert(false);

        // analysis
        let an = &mut self.analysis;
        if *an.k_max.get_or_insert(100_000) < 1 {
            return Err(invalid("analysis.K_max", "must be at least 1"));
        }
        if let LPhiSpec::Config { config } = an.l_phi.get_or_insert(LPhiSpec::Probe(ProbeKeyword::Probe)) {
            if !(*config > 1.0) || !config.is_finite() {
                return Err(invalid("analysis.L_Phi.config", format!("must be a finite value > 1, got {config}")));
            }
        }
        let probe_defaults = ProbeConfig::default();
        let probe = an.probe.get_or_insert_with(ProbeBlock::default);
        if *probe.trials.get_or_insert(probe_defaults.trials) < 1 {
            return Err(invalid("analysis.probe.trials", "must be at least 1"));
        }
        probe.seed.get_or_insert(probe_defaults.seed);
        for (name, v) in [("state_radius", probe.state_radius.get_or_insert(probe_defaults.state_radius)), ("prior_radius", probe.prior_radius.get_or_insert(probe_defaults.prior_radius))] {
            if !(*v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("analysis.probe.{name}"), "must be finite and nonnegative"));
            }
        }
        if *an.lipschitz_samples.get_or_insert(10_000) < 2 {
            return Err(invalid("analysis.lipschitz_samples", "at least two samples are needed"));
        }
        if !(*an.lipschitz_radius.get_or_insert(20.0) > 0.0) {
            return Err(invalid("analysis.lipschitz_radius", "must be positive"));
        }
        if an.gamma13_magnitudes.get_or_insert_with(|| vec![0.01, 0.1, 1.0, 5.0]).iter().any(|m| !(*m >= 0.0)) {
            return Err(invalid("analysis.gamma13_magnitudes", "magnitudes must be nonnegative"));
        }
        an.gamma13_horizon.get_or_insert(200);
        let smoke = an.smoke_test.get_or_insert_with(SmokeTestBlock::default);
        if !(*smoke.radius.get_or_insert(20.0) >= 0.0) {
            return Err(invalid("analysis.smoke_test.radius", "must be nonnegative"));
        }
        smoke.horizon.get_or_insert(500);
        smoke.trials.get_or_insert(20);

        // output
        let out = &mut self.output;
        out.dir.get_or_insert_with(|| ".".to_string());
        out.csv.get_or_insert_with(|| "trajectory.csv".to_string());
        out.json.get_or_insert_with(|| "summary.json".to_string());
        Ok(())
    }

    // Accessors below assume a validated document.

    pub fn system(&self) -> LtiSystem {
        let s = &self.system;
        let d = self.scenario.disturbance.as_ref().expect("validated");
        let matrix = |m: &Option<Matrix>| {
            let rows = m.as_ref().expect("validated");
            DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
        };
        LtiSystem {
            a: matrix(&s.a),
            b: matrix(&s.b),
            c: matrix(&s.c),
            x_box: to_box(s.x_box.as_ref().expect("validated")),
            u_box: to_box(self.controller.u_box.as_ref().expect("validated")),
            y_box: to_box(s.y_box.as_ref().expect("validated")),
            w1_box: to_box(d.w1_box.as_ref().expect("validated")),
            w2_box: to_box(d.w2_box.as_ref().expect("validated")),
        }
    }

    pub fn certificate_is_search(&self) -> bool {
        matches!(&self.certificate.p, Some(MatrixOrDirective::Directive(_)))
    }

    /// The configured certificate, or one found by search, with its LMI
    /// verdict.
    pub fn certificate(&self, sys: &LtiSystem) -> Result<(IossCertificate, LmiVerdict)> {
        let c = &self.certificate;
        let mat = |m: &Matrix| DMatrix::from_fn(m.len(), m[0].len(), |i, j| m[i][j]);
        let q = mat(c.q.as_ref().expect("validated"));
        let r = mat(c.r.as_ref().expect("validated"));
        let eta = c.eta.expect("validated");
        let tol = c.tol.expect("validated");
        match c.p.as_ref().expect("validated") {
            MatrixOrDirective::Matrix(p) => {
                let cert = IossCertificate::new(mat(p), q, r, eta, tol)?;
                let verdict = verify_ioss_lmi(sys, &cert)?;
                Ok((cert, verdict))
            }
            MatrixOrDirective::Directive(_) => {
                let s = c.search.as_ref().expect("validated");
                let search = CertificateSearch {
                    budget: s.budget.expect("validated"),
                    min_eig_floor: s.min_eig_floor.expect("validated"),
                    tol,
                };
                find_certificate(sys, &q, &r, eta, search)
            }
        }
    }

    pub fn feedback_law(&self, sys: &LtiSystem) -> Result<FeedbackLaw> {
        let gain = match self.controller.gain.as_ref().expect("validated") {
            MatrixOrDirective::Matrix(m) => DMatrix::from_fn(m.len(), m[0].len(), |i, j| m[i][j]),
            MatrixOrDirective::Directive(_) => lqr_gain(&sys.a, &sys.b, &DMatrix::identity(sys.nx(), sys.nx()), &DMatrix::identity(sys.nu(), sys.nu()))?,
        };
        let mut law = FeedbackLaw::new(gain, sys.u_box.clone())?;
        law.declared_lipschitz = self.controller.l_pi;
        Ok(law)
    }

    pub fn horizon(&self) -> usize {
        self.mhe.horizon.expect("validated")
    }

    /// `None` when `K` is `"auto"`.
    pub fn fixed_iterations(&self) -> Option<usize> {
        match self.mhe.iterations.expect("validated") {
            IterationSpec::Fixed(k) => Some(k),
            IterationSpec::Auto(_) => None,
        }
    }

    pub fn step_rule(&self) -> StepRule {
        self.mhe.step_rule.expect("validated")
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_column_slice(self.scenario.x0.as_ref().expect("validated"))
    }

    pub fn prior(&self) -> DVector<f64> {
        DVector::from_column_slice(self.scenario.prior.as_ref().expect("validated"))
    }

    pub fn z0(&self) -> DVector<f64> {
        DVector::from_column_slice(self.scenario.z0.as_ref().expect("validated"))
    }

    pub fn steps(&self) -> usize {
        self.scenario.steps.expect("validated")
    }

    pub fn seed(&self) -> u64 {
        self.scenario.seed.expect("validated")
    }

    pub fn oracle_tol(&self) -> Option<f64> {
        self.scenario.oracle.expect("validated").then(|| self.scenario.oracle_tol.expect("validated"))
    }

    pub fn monitors(&self) -> MonitorToggles {
        let m = self.scenario.monitors.expect("validated");
        MonitorToggles {
            recursion: m.recursion,
            lyapunov: m.lyapunov,
            trajectory: m.trajectory,
            contraction: m.contraction,
        }
    }

    pub fn strict(&self) -> bool {
        self.scenario.strict.expect("validated")
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let p = self.analysis.probe.as_ref().expect("validated");
        ProbeConfig {
            trials: p.trials.expect("validated"),
            seed: p.seed.expect("validated"),
            state_radius: p.state_radius.expect("validated"),
            prior_radius: p.prior_radius.expect("validated"),
            include_growing: true,
            oracle_tol: self.scenario.oracle_tol.expect("validated"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"{
        "schema_version": 1,
        "system": {"A": [[0.5]], "B": [[1.0]], "C": [[1.0]]},
        "certificate": {"P": "search", "Q": [[1, 0], [0, 1]], "R": [[1]], "eta": 0.5},
        "controller": {"gain": [[0.2]], "u_box": [[-1, 1]]},
        "mhe": {"M": 3, "K": 10},
        "scenario": {"x0": [1.0], "prior": [0.0], "disturbance": {"w1_box": [[-0.1, 0.1]], "w2_box": [[-0.1, 0.1]]}}
    }"#;

    #[test]
    fn defaults_filled_and_round_trip() {
        let doc = parse_config(MINIMAL).unwrap();
        assert_eq!(doc.steps(), 40);
        assert_eq!(doc.z0().as_slice(), &[0.0]);
        assert_eq!(doc.system.x_box, Some(unbounded_spec(1)));
        let again = parse_config(&doc.to_canonical_json()).unwrap();
        assert_eq!(doc, again);
        assert_eq!(doc.hash(), again.hash());
    }

    #[test]
    fn missing_matrix_reports_path() {
        let text = MINIMAL.replace(r#", "C": [[1.0]]"#, "");
        match parse_config(&text) {
            Err(Error::Validation { path, .. }) => assert_eq!(path, "system.C"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected_with_path() {
        let text = MINIMAL.replace(r#""M": 3"#, r#""M": 3, "horizon": 4"#);
        match parse_config(&text) {
            Err(Error::Parse { path, message }) => {
                assert_eq!(path, "mhe.horizon");
                assert!(message.contains("horizon"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn infinite_bounds_parse() {
        let text = MINIMAL.replace(r#""u_box": [[-1, 1]]"#, r#""u_box": [["-inf", "inf"]]"#);
        let doc = parse_config(&text).unwrap();
        assert!(doc.system().u_box.is_unbounded());
        assert!(doc.to_canonical_json().contains("\"-inf\""));
    }

    #[test]
    fn box_without_origin_reports_path() {
        let text = MINIMAL.replace(r#""w1_box": [[-0.1, 0.1]]"#, r#""w1_box": [[0.1, 0.2]]"#);
        match parse_config(&text) {
            Err(Error::Validation { path, .. }) => assert_eq!(path, "scenario.disturbance.w1_box[0]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ragged_and_misshaped_matrices() {
        let text = MINIMAL.replace(r#""Q": [[1, 0], [0, 1]]"#, r#""Q": [[1, 0], [0]]"#);
        assert!(matches!(parse_config(&text), Err(Error::Validation { path, .. }) if path == "certificate.Q[1]"));
        let text = MINIMAL.replace(r#""gain": [[0.2]]"#, r#""gain": [[0.2, 0.1]]"#);
        assert!(matches!(parse_config(&text), Err(Error::Validation { path, .. }) if path == "controller.gain"));
    }

    #[test]
    fn directives() {
        let text = MINIMAL.replace(r#""K": 10"#, r#""K": "auto""#).replace(r#""gain": [[0.2]]"#, r#""gain": "lqr""#);
        let doc = parse_config(&text).unwrap();
        assert_eq!(doc.fixed_iterations(), None);
        let law = doc.feedback_law(&doc.system()).unwrap();
        assert!(law.gain[(0, 0)] > 0.0);
        let text = MINIMAL.replace(r#""K": 10"#, r#""K": "never""#);
        assert!(matches!(parse_config(&text), Err(Error::Parse { .. })));
    }

    #[test]
    fn wrong_schema_version() {
        let text = MINIMAL.replace(r#""schema_version": 1"#, r#""schema_version": 2"#);
        assert!(matches!(parse_config(&text), Err(Error::Validation { path, .. }) if path == "schema_version"));
    }
}
