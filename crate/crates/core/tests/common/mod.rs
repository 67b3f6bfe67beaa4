#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use proptest::test_runner::Config;
use rand::Rng;

use submhe::config::{load_config, ConfigDocument};
use submhe::linalg::spectral_norm;
use submhe::mhe::{build_problem, effective_horizon, MheProblem};
use submhe::model::{BoxSet, Interval, IossCertificate, LtiSystem};
use submhe::sampling::{seeded, uniform_cube, Prng};

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn shipped() -> ConfigDocument {
    load_config(&config_path("case_study.json")).unwrap()
}

pub fn shipped_system() -> (LtiSystem, IossCertificate) {
    let doc = shipped();
    let sys = doc.system();
    let (cert, verdict) = doc.certificate(&sys).unwrap();
    assert!(verdict.pass);
    (sys, cert)
}

pub fn random_spd(rng: &mut Prng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let (q, _) = m.qr().unpack();
    let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(lo..hi)));
    let s = &q * d * q.transpose();
    (&s + s.transpose()) * 0.5
}

pub fn random_interval(rng: &mut Prng) -> Interval {
    match rng.random_range(0..4) {
        0 => Interval::UNBOUNDED,
        1 => Interval::new(-rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)),
        _ => Interval::new(-rng.random_range(0.05..3.0), rng.random_range(0.05..3.0)),
    }
}

/// A random problem with the data window it was built from.
pub struct RandomProblem {
    pub sys: LtiSystem,
    pub cert: IossCertificate,
    pub horizon: usize,
    pub problem: MheProblem,
}

pub fn random_problem(seed: u64, max_nx: usize, max_horizon: usize) -> RandomProblem {
    let mut rng = seeded(seed);
    let nx = rng.random_range(1..=max_nx);
    let nu = rng.random_range(1..=2);
    let ny = rng.random_range(1..=3);
    let horizon = rng.random_range(1..=max_horizon);
    let a = DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-1.0..1.0));
    let radius = rng.random_range(0.3..1.2);
    let a = &a * (radius / spectral_norm(&a).max(1e-9));
    let b = DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-1.0..1.0));
    let c = DMatrix::from_fn(ny, nx, |_, _| rng.random_range(-1.0..1.0));
    let mut sys = LtiSystem::unconstrained(a, b, c);
    sys.x_box = BoxSet((0..nx).map(|_| random_interval(&mut rng)).collect());
    sys.w1_box = BoxSet((0..nx).map(|_| random_interval(&mut rng)).collect());
    sys.w2_box = BoxSet((0..ny).map(|_| random_interval(&mut rng)).collect());
    let cert = IossCertificate::new(
        random_spd(&mut rng, nx, 0.2, 2.0),
        random_spd(&mut rng, nx + ny, 0.2, 2.0),
        random_spd(&mut rng, ny, 0.2, 2.0),
        rng.random_range(0.5..0.95),
        1e-8,
    )
    .unwrap();
    let t = rng.random_range(0..=horizon + 1);
    let mt = effective_horizon(horizon, t);
    let us: Vec<_> = (0..mt).map(|_| uniform_cube(&mut rng, nu, 1.0)).collect();
    let ys: Vec<_> = (0..mt).map(|_| uniform_cube(&mut rng, ny, 5.0)).collect();
    let prior = uniform_cube(&mut rng, nx, 5.0);
    let problem = build_problem(&sys, &cert, &prior, &us, &ys, horizon, t).unwrap();
    RandomProblem { sys, cert, horizon, problem }
}

/// A point of the box, with unbounded sides replaced by `[−r, r]`.
pub fn point_in(rng: &mut Prng, boxes: &BoxSet, r: f64) -> DVector<f64> {
    DVector::from_iterator(
        boxes.dim(),
        boxes.0.iter().map(|iv| {
            let (lo, hi) = (iv.lower.max(-r), iv.upper.min(r));
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        }),
    )
}

pub fn config(cases: u32) -> Config {
    Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    }
}
