mod common;

use proptest::prelude::*;
use serde_json::Value;

use submhe::cli::run_cli;
use submhe::config::{parse_config, IterationSpec};

use common::config_path;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("submhe").chain(args.iter().copied());
    let code = run_cli(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn error_json(stderr: &str) -> Value {
    serde_json::from_str(stderr.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {stderr}"))
}

fn example(name: &str) -> String {
    config_path(name).to_string_lossy().into_owned()
}

#[test]
fn certify_reports_eigenvalue() {
    let (code, out, _) = run(&["certify", "--config", &example("case_study.json")]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["pass"], true);
    assert!(v["max_eigenvalue"].as_f64().unwrap() <= v["tol"].as_f64().unwrap());
}

#[test]
fn analyze_k_rejects_non_contracting_horizon() {
    let (code, _, err) = run(&["analyze-k", "--config", &example("case_study.json")]);
    assert_eq!(code, 1);
    let e = error_json(&err);
    assert_eq!(e["error"], "ContractionViolated");
    assert_eq!(e["min_horizon"], 9);
}

#[test]
fn analyze_k_finds_k_on_certified_example() {
    let (code, out, _) = run(&["analyze-k", "--config", &example("case_study_certified.json")]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    let k = v["k_star"].as_u64().unwrap();
    assert!(k > 1);
    assert_eq!(v["ledger"]["verdict"]["pass"], true);
}

#[test]
fn simulate_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_string_lossy().into_owned();
    let (code, _, err) = run(&["simulate", "--config", &example("case_study.json"), "--steps", "40", "--uncertified", "--out", &out_dir]);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["prng"], "ChaCha8Rng");
    assert_eq!(summary["certification"]["certified"], false);
    assert_eq!(summary["verdicts"]["lyapunov"]["fail"], 0);
}

#[test]
fn simulate_requires_gate_when_uncertified() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_string_lossy().into_owned();
    let (code, _, err) = run(&["simulate", "--config", &example("case_study.json"), "--out", &out_dir]);
    assert_eq!(code, 1);
    assert_eq!(error_json(&err)["error"], "ContractionViolated");
    assert!(!dir.path().join("trajectory.csv").exists());
}

#[test]
fn small_k_on_certified_example_is_not_certified() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_string_lossy().into_owned();
    let (code, _, err) = run(&["simulate", "--config", &example("case_study_certified.json"), "--iters", "5", "--steps", "3", "--out", &out_dir]);
    assert_eq!(code, 1);
    assert_eq!(error_json(&err)["error"], "SmallGainViolated");
}

#[test]
fn verify_passes_on_examples() {
    for name in ["case_study.json", "case_study_certified.json"] {
        let (code, out, err) = run(&["verify", "--config", &example(name)]);
        assert_eq!(code, 0, "{name}: {err}");
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["pass"], true);
    }
}

#[test]
fn config_errors_carry_paths() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config_path("case_study.json")).unwrap();

    let bad_key = dir.path().join("bad_key.json");
    std::fs::write(&bad_key, text.replace("\"phi_base\"", "\"phi\"")).unwrap();
    let (code, _, err) = run(&["certify", "--config", bad_key.to_str().unwrap()]);
    assert_eq!(code, 2);
    let e = error_json(&err);
    assert_eq!(e["error"], "ParseError");
    assert_eq!(e["path"], "mhe.phi");

    let mut doc: Value = serde_json::from_str(&text).unwrap();
    doc["system"].as_object_mut().unwrap().remove("C");
    let missing = dir.path().join("missing.json");
    std::fs::write(&missing, doc.to_string()).unwrap();
    let (code, _, err) = run(&["certify", "--config", missing.to_str().unwrap()]);
    assert_eq!(code, 2);
    let e = error_json(&err);
    assert_eq!(e["error"], "ValidationError");
    assert_eq!(e["path"], "system.C");

    let (code, _, err) = run(&["certify", "--config", dir.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(code, 2);
    assert_eq!(error_json(&err)["error"], "IoError");
}

#[test]
fn usage_errors() {
    let (code, _, err) = run(&["simulate"]);
    assert_eq!(code, 2);
    assert_eq!(error_json(&err)["error"], "UsageError");
    let (code, _, _) = run(&["simulate", "--config", "x.json", "--oracle", "maybe"]);
    assert_eq!(code, 2);
    let (code, _, _) = run(&["simulate", "--config", &example("case_study.json"), "--steps", "0"]);
    assert_eq!(code, 2);
}

proptest! {
    #![proptest_config(common::config(32))]

    #[test]
    fn config_round_trip(seed in any::<u64>(), steps in 1usize..500, horizon in 1usize..12, k in proptest::option::of(1usize..5000)) {
        let mut doc = common::shipped();
        doc.scenario.seed = Some(seed);
        doc.scenario.steps = Some(steps);
        doc.mhe.horizon = Some(horizon);
        if let Some(k) = k {
            doc.mhe.iterations = Some(IterationSpec::Fixed(k));
        }
        let once = parse_config(&doc.to_canonical_json()).unwrap();
        let twice = parse_config(&once.to_canonical_json()).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(once.hash(), twice.hash());
    }
}
