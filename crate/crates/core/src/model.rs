//! Plant, constraint boxes and the incremental IOSS Lyapunov certificate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, clamp_spectrum, sym_eigen, weighted_sq_norm};

/// Default tolerance on the maximum eigenvalue of the LMI block matrix.
pub const DEFAULT_LMI_TOL: f64 = 1e-8;

/// Closed interval, either side possibly infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub const UNBOUNDED: Interval = Interval {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
    };

    pub fn new(lower: f64, upper: f64) -> Self {
        Interval { lower, upper }
    }

    pub fn symmetric(radius: f64) -> Self {
        Interval::new(-radius, radius)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn clamp(&self, v: f64) -> f64 {
        // `f64::clamp` would panic on NaN bounds; ours are validated.
        v.max(self.lower).min(self.upper)
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.is_finite() && self.upper.is_finite()
    }
}

/// Axis-aligned box, one interval per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet(pub Vec<Interval>);

impl BoxSet {
    pub fn unbounded(dim: usize) -> Self {
        BoxSet(vec![Interval::UNBOUNDED; dim])
    }

    pub fn uniform(dim: usize, interval: Interval) -> Self {
        BoxSet(vec![interval; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, v: &DVector<f64>) -> bool {
        v.len() == self.dim() && self.0.iter().zip(v.iter()).all(|(iv, &x)| iv.contains(x))
    }

    pub fn clamp(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(v.len(), self.0.iter().zip(v.iter()).map(|(iv, &x)| iv.clamp(x)))
    }

    pub fn is_bounded(&self) -> bool {
        self.0.iter().all(Interval::is_bounded)
    }

    pub fn is_unbounded(&self) -> bool {
        self.0.iter().all(|iv| iv.lower == f64::NEG_INFINITY && iv.upper == f64::INFINITY)
    }

    pub fn lower(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.0.iter().map(|iv| iv.lower))
    }

    pub fn upper(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.0.iter().map(|iv| iv.upper))
    }

    fn check(&self, which: &str, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::dims(format!("{which} dimension"), dim, self.dim()));
        }
        for (index, iv) in self.0.iter().enumerate() {
            if iv.lower.is_nan() || iv.upper.is_nan() || iv.lower > iv.upper {
                return Err(Error::InvalidBox {
                    which: which.to_string(),
                    index,
                    reason: format!("lower {} exceeds upper {}", iv.lower, iv.upper),
                });
            }
            if !iv.contains(0.0) {
                return Err(Error::BoxExcludesOrigin {
                    which: which.to_string(),
                    index,
                    lower: iv.lower,
                    upper: iv.upper,
                });
            }
        }
        Ok(())
    }
}

/// `x⁺ = A x + B u + w¹`, `y = C x + w²` with box constraints on every signal.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub x_box: BoxSet,
    pub u_box: BoxSet,
    pub y_box: BoxSet,
    pub w1_box: BoxSet,
    pub w2_box: BoxSet,
}

impl LtiSystem {
    /// System with unbounded state, output and disturbance boxes.
    pub fn unconstrained(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Self {
        let (nx, nu, ny) = (a.nrows(), b.ncols(), c.nrows());
        LtiSystem {
            a,
            b,
            c,
            x_box: BoxSet::unbounded(nx),
            u_box: BoxSet::unbounded(nu),
            y_box: BoxSet::unbounded(ny),
            w1_box: BoxSet::unbounded(nx),
            w2_box: BoxSet::unbounded(ny),
        }
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn ny(&self) -> usize {
        self.c.nrows()
    }

    /// Dimension of the augmented disturbance `w = [w¹; w²]`.
    pub fn nw(&self) -> usize {
        self.nx() + self.ny()
    }

    pub fn w_box(&self) -> BoxSet {
        BoxSet(self.w1_box.0.iter().chain(self.w2_box.0.iter()).copied().collect())
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w1: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + w1
    }

    pub fn output(&self, x: &DVector<f64>, w2: &DVector<f64>) -> DVector<f64> {
        &self.c * x + w2
    }
}

/// Checks shapes and that every box contains the origin.
pub fn validate_system(sys: LtiSystem) -> Result<LtiSystem> {
    let nx = sys.a.nrows();
    if !sys.a.is_square() {
        return Err(Error::dims("A (must be square)", format!("{nx}x{nx}"), format!("{}x{}", nx, sys.a.ncols())));
    }
    if sys.b.nrows() != nx {
        return Err(Error::dims("B rows", nx, sys.b.nrows()));
    }
    if sys.c.ncols() != nx {
        return Err(Error::dims("C columns", nx, sys.c.ncols()));
    }
    let all_finite = sys.a.iter().chain(sys.b.iter()).chain(sys.c.iter()).all(|v| v.is_finite());
    if !all_finite {
        return Err(Error::InvalidParameter {
            name: "system".into(),
            reason: "A, B, C must have finite entries".into(),
        });
    }
    sys.x_box.check("x_box", nx)?;
    sys.u_box.check("u_box", sys.nu())?;
    sys.y_box.check("y_box", sys.ny())?;
    sys.w1_box.check("w1_box", nx)?;
    sys.w2_box.check("w2_box", sys.ny())?;
    Ok(sys)
}

/// `(P, Q, R, η)` for the dissipation inequality of the δ-IOSS Lyapunov
/// function `W_δ(x, x') = ‖x − x'‖²_P`.
#[derive(Debug, Clone, PartialEq)]
pub struct IossCertificate {
    pub p: DMatrix<f64>,
    /// Weight on the augmented disturbance, `(n_x + n_y)`-square.
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub eta: f64,
    pub tol: f64,
}

impl IossCertificate {
    /// Checks symmetry, positive definiteness and `η ∈ [0, 1)`. The LMI
    /// itself is checked by [`verify_ioss_lmi`].
    pub fn new(p: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>, eta: f64, tol: f64) -> Result<Self> {
        check_spd("P", &p)?;
        check_spd("Q", &q)?;
        check_spd("R", &r)?;
        if !(0.0..1.0).contains(&eta) {
            return Err(Error::InvalidParameter {
                name: "eta".into(),
                reason: format!("must lie in [0, 1), got {eta}"),
            });
        }
        if !(tol >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "tol".into(),
                reason: format!("must be nonnegative, got {tol}"),
            });
        }
        Ok(IossCertificate { p, q, r, eta, tol })
    }

    pub fn nx(&self) -> usize {
        self.p.nrows()
    }

    pub fn check_dims(&self, sys: &LtiSystem) -> Result<()> {
        let (nx, ny) = (sys.nx(), sys.ny());
        if self.p.shape() != (nx, nx) {
            return Err(Error::dims("P", format!("{nx}x{nx}"), shape(&self.p)));
        }
        if self.q.shape() != (nx + ny, nx + ny) {
            return Err(Error::dims("Q", format!("{0}x{0}", nx + ny), shape(&self.q)));
        }
        if self.r.shape() != (ny, ny) {
            return Err(Error::dims("R", format!("{ny}x{ny}"), shape(&self.r)));
        }
        Ok(())
    }
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn check_spd(which: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::dims(format!("{which} (must be square)"), "square", shape(m)));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * m.amax().max(1.0) || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite {
            which: which.into(),
            min_eig: f64::NAN,
        });
    }
    let min_eig = linalg::min_eigenvalue(m);
    if !(min_eig > 0.0) {
        return Err(Error::NotPositiveDefinite {
            which: which.into(),
            min_eig,
        });
    }
    Ok(())
}

/// The symmetric block matrix whose negative semidefiniteness certifies the
/// dissipation inequality, with `B̄ = [I, 0]` and `D̄ = [0, I]`.
pub fn lmi_matrix(sys: &LtiSystem, p: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, eta: f64) -> DMatrix<f64> {
    let (nx, ny) = (sys.nx(), sys.ny());
    let nw = nx + ny;
    let (a, c) = (&sys.a, &sys.c);
    let mut bbar = DMatrix::zeros(nx, nw);
    bbar.view_mut((0, 0), (nx, nx)).fill_with_identity();
    let mut dbar = DMatrix::zeros(ny, nw);
    dbar.view_mut((0, nx), (ny, ny)).fill_with_identity();

    let top_left = a.transpose() * p * a - p * eta - c.transpose() * r * c;
    let top_right = a.transpose() * p * &bbar - c.transpose() * r * &dbar;
    let bottom_right = bbar.transpose() * p * &bbar - q - dbar.transpose() * r * &dbar;

    let n = nx + nw;
    let mut m = DMatrix::zeros(n, n);
    m.view_mut((0, 0), (nx, nx)).copy_from(&top_left);
    m.view_mut((0, nx), (nx, nw)).copy_from(&top_right);
    m.view_mut((nx, 0), (nw, nx)).copy_from(&top_right.transpose());
    m.view_mut((nx, nx), (nw, nw)).copy_from(&bottom_right);
    linalg::symmetrize(&m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmiVerdict {
    pub pass: bool,
    pub max_eigenvalue: f64,
    pub tol: f64,
}

pub fn verify_ioss_lmi(sys: &LtiSystem, cert: &IossCertificate) -> Result<LmiVerdict> {
    cert.check_dims(sys)?;
    let m = lmi_matrix(sys, &cert.p, &cert.q, &cert.r, cert.eta);
    let max_eigenvalue = linalg::max_eigenvalue(&m);
    Ok(LmiVerdict {
        pass: max_eigenvalue <= cert.tol,
        max_eigenvalue,
        tol: cert.tol,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct CertificateSearch {
    pub budget: usize,
    /// Eigenvalue floor kept on `P` during the search.
    pub min_eig_floor: f64,
    pub tol: f64,
}

impl Default for CertificateSearch {
    fn default() -> Self {
        CertificateSearch {
            budget: 20_000,
            min_eig_floor: 1e-3,
            tol: DEFAULT_LMI_TOL,
        }
    }
}

/// Eigenvalue-cut search for `P`.
///
/// Each iteration takes the eigenvector `v = [v₁; v₂]` of the most positive
/// LMI eigenvalue. The eigenvalue is convex in `P` with subgradient
/// `g gᵀ − η v₁ v₁ᵀ`, `g = A v₁ + B̄ v₂`; `P` moves against it with a Polyak
/// step aimed slightly below zero and is clamped back to `P ⪰ floor·I`.
pub fn find_certificate(
    sys: &LtiSystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    eta: f64,
    search: CertificateSearch,
) -> Result<(IossCertificate, LmiVerdict)> {
    let nx = sys.nx();
    // Validates Q, R and eta up front; P = I is a placeholder.
    let template = IossCertificate::new(DMatrix::identity(nx, nx), q.clone(), r.clone(), eta, search.tol)?;
    template.check_dims(sys)?;

    let target = 10.0 * search.tol.max(1e-12);
    let mut p = DMatrix::<f64>::identity(nx, nx).scale(search.min_eig_floor.max(1.0));
    let mut best = f64::INFINITY;
    for _ in 0..=search.budget {
        let m = lmi_matrix(sys, &p, q, r, eta);
        let eig = sym_eigen(&m);
        let lam = eig.max();
        best = best.min(lam);
        if lam <= search.tol {
            if let Ok(cert) = IossCertificate::new(p.clone(), q.clone(), r.clone(), eta, search.tol) {
                let verdict = verify_ioss_lmi(sys, &cert)?;
                if verdict.pass {
                    return Ok((cert, verdict));
                }
            }
        }
        let v = eig.vectors.column(eig.values.len() - 1).into_owned();
        let v1 = v.rows(0, nx).into_owned();
        let g = &sys.a * &v1 + v.rows(nx, nx);
        let grad = &g * g.transpose() - (&v1 * v1.transpose()).scale(eta);
        let gn = grad.norm_squared();
        if gn <= f64::MIN_POSITIVE {
            break;
        }
        let step = (lam + target) / gn;
        p = clamp_spectrum(&(&p - grad.scale(step)), search.min_eig_floor);
    }
    Err(Error::CertificateNotFound {
        budget: search.budget,
        best_max_eig: best,
    })
}

/// `W_δ(x, x') = ‖x − x'‖²_P`.
pub fn w_delta(cert: &IossCertificate, x: &DVector<f64>, x_other: &DVector<f64>) -> Result<f64> {
    let nx = cert.nx();
    if x.len() != nx || x_other.len() != nx {
        return Err(Error::dims("w_delta arguments", nx, format!("{} and {}", x.len(), x_other.len())));
    }
    Ok(weighted_sq_norm(&(x - x_other), &cert.p).max(0.0))
}

/// Process and measurement disturbance of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDisturbance {
    pub w1: DVector<f64>,
    pub w2: DVector<f64>,
}

impl AugmentedDisturbance {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        AugmentedDisturbance {
            w1: DVector::zeros(nx),
            w2: DVector::zeros(ny),
        }
    }

    pub fn stacked(&self) -> DVector<f64> {
        let mut w = DVector::zeros(self.w1.len() + self.w2.len());
        w.rows_mut(0, self.w1.len()).copy_from(&self.w1);
        w.rows_mut(self.w1.len(), self.w2.len()).copy_from(&self.w2);
        w
    }
}

/// Both sides of the one-step dissipation inequality
/// `W_δ(x⁺, x'⁺) ≤ η W_δ(x, x') + ‖w − w'‖²_Q + ‖y − y'‖²_R`
/// for two trajectories driven by the same input.
#[derive(Debug, Clone, Copy)]
pub struct DissipationSample {
    pub lhs: f64,
    pub rhs: f64,
}

impl DissipationSample {
    pub fn holds(&self, rel_tol: f64) -> bool {
        self.lhs <= self.rhs + rel_tol * self.rhs.abs().max(self.lhs.abs()).max(1e-300)
    }
}

pub fn dissipation_sample(
    sys: &LtiSystem,
    cert: &IossCertificate,
    x: &DVector<f64>,
    x_other: &DVector<f64>,
    u: &DVector<f64>,
    w: &AugmentedDisturbance,
    w_other: &AugmentedDisturbance,
) -> Result<DissipationSample> {
    let next = sys.step(x, u, &w.w1);
    let next_other = sys.step(x_other, u, &w_other.w1);
    let y = sys.output(x, &w.w2);
    let y_other = sys.output(x_other, &w_other.w2);
    let lhs = w_delta(cert, &next, &next_other)?;
    let rhs = cert.eta * w_delta(cert, x, x_other)?
        + weighted_sq_norm(&(w.stacked() - w_other.stacked()), &cert.q)
        + weighted_sq_norm(&(y - y_other), &cert.r);
    Ok(DissipationSample { lhs, rhs })
}
