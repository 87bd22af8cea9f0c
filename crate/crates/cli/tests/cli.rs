use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use maglev_dfc::commands::ComparisonReport;
use maglev_dfc::files::{GainFile, Manifest};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maglev-dfc")).args(args).output().unwrap()
}

fn run_in(out: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--out", out.to_str().unwrap()];
    all.extend_from_slice(args);
    run(&all)
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn reruns_with_same_seed_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert!(run_in(d, &["--seed", "7", "train"]).status.success());
    }
    for name in ["epochs.csv", "inner.csv", "epoch-001-train.csv", "epoch-002-test.csv", "gain-trained.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma.config_sha256, mb.config_sha256);
    assert_eq!(ma.seed, 7);
    assert_eq!(ma.status, "ok");
    assert!(ma.outputs.iter().any(|o| o == "trace.json"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let bad = write_config(dir, r#"{"sede": 3}"#);
    assert_eq!(run(&["--config", &bad, "design"]).status.code(), Some(2));
    assert_eq!(run(&["--config", &bad, "--preset", "ideal", "design"]).status.code(), Some(2));
    assert_eq!(run(&["compare"]).status.code(), Some(2));

    let missing = dir.join("none.json");
    let out = dir.join("io");
    assert_eq!(run_in(&out, &["compare", missing.to_str().unwrap()]).status.code(), Some(1));

    let flat = write_config(dir, r#"{"exploration": {"amplitude": 0.0}}"#);
    let out = dir.join("flat");
    let res = run_in(&out, &["--config", &flat, "train"]);
    assert_eq!(res.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&res.stderr).contains("insufficient excitation"));
    // The manifest is still written and records the failure.
    assert!(manifest(&out).status.starts_with("error (exit 4)"));
    assert!(out.join("trace.json").exists());
}

#[test]
fn zero_state_weight_designs_zero_gain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"q_diag": [0, 0, 0, 0]}"#);
    let out = tmp.path().join("d");
    assert!(run_in(&out, &["--config", &cfg, "design"]).status.success());
    let g = GainFile::read(&out.join("gain-are.json")).unwrap();
    assert_eq!(g.gain.matrix().amax(), 0.0);
    assert!(!out.join("pi-trace.json").exists());
}

#[test]
fn design_from_identified_model() {
    let tmp = tempfile::tempdir().unwrap();
    let id = tmp.path().join("id");
    assert!(run_in(&id, &["identify"]).status.success());
    let report: Value = serde_json::from_slice(&fs::read(id.join("identify-report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert!(id.join("freq-1-y2-u1.csv").exists());

    let model = id.join("model-1-pem.json");
    let d = tmp.path().join("d");
    let res = run_in(&d, &["design", "--model", model.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let from_id = GainFile::read(&d.join("gain-are.json")).unwrap().gain;
    let from_id_run = GainFile::read(&id.join("gain-id-1.json")).unwrap().gain;
    assert!((from_id.matrix() - from_id_run.matrix()).norm() < 1e-9);
}

#[test]
fn bias_study_separates_feedback_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert!(run_in(&d, &["--preset", "hardware", "design"]).status.success());
    let c = tmp.path().join("c");
    let gains = [d.join("gain-are.json"), d.join("gain-lqr.json")];
    let res = run_in(
        &c,
        &["--preset", "hardware", "compare", gains[0].to_str().unwrap(), gains[1].to_str().unwrap()],
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: ComparisonReport = serde_json::from_slice(&fs::read(c.join("compare.json")).unwrap()).unwrap();
    let dfc = report.record("K_ARE").unwrap();
    let sf = report.record("K_LQR").unwrap();
    assert!(dfc.steady_state_offset.unwrap() < 1e-6);
    assert!(dfc.steady_state_input.unwrap() < 1e-6);
    assert!(sf.steady_state_offset.unwrap() > 1e-3);
    assert!(sf.steady_state_input.unwrap() > 1e-3);
    let summary = fs::read_to_string(c.join("compare-summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn simulate_defaults_to_initial_gain() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    assert!(run_in(&out, &["simulate"]).status.success());
    let traj = dfc_core::sim::Trajectory::read_csv(fs::File::open(out.join("trajectory.csv")).unwrap()).unwrap();
    assert_eq!(traj.len(), 5001);
    assert!(traj.final_state().norm() < 1e-6);
}
