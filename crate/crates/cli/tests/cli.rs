//! Drives the `finde` binary end to end on tiny configurations.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn finde(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_finde"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = r#"{
    "system": {"name": "fitzhugh-nagumo", "train_series": 4, "train_steps": 20, "test_series": 2, "test_steps": 30},
    "model": {"arch": {"kind": "mlp", "hidden": [8]}, "k": 1},
    "finde": "cfinde",
    "train": {"iterations": 20, "batch_size": 8, "log_every": 10},
    "sweep": {"ks": [0, 1], "trials": 1},
    "paths": {"data": "data", "run": "run"}
}"#;

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    dir
}

#[test]
fn generate_is_deterministic_and_audits_invariants() {
    let dir = tiny_dir();
    let stdout = ok(&finde(dir.path(), &["--config", "c.json", "generate", "--out", "a"]));
    ok(&finde(dir.path(), &["--config", "c.json", "generate", "--out", "b"]));
    assert!(stdout.contains("audit train I"), "{stdout}");
    for split in ["train", "test"] {
        let a = fs::read(dir.path().join("a").join(split).join("data.f64")).unwrap();
        let b = fs::read(dir.path().join("b").join(split).join("data.f64")).unwrap();
        assert_eq!(a, b);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/test/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_series"], 2);
    assert_eq!(manifest["n_steps"], 30);
}

#[test]
fn seed_changes_the_data() {
    let dir = tiny_dir();
    ok(&finde(dir.path(), &["--config", "c.json", "generate", "--out", "a"]));
    ok(&finde(
        dir.path(),
        &["--config", "c.json", "--seed", "9", "generate", "--out", "b"],
    ));
    let a = fs::read(dir.path().join("a/train/data.f64")).unwrap();
    let b = fs::read(dir.path().join("b/train/data.f64")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tiny_dir();
    fs::write(
        dir.path().join("bad.json"),
        r#"{"system": "fitzhugh-nagumo", "trian": {}}"#,
    )
    .unwrap();
    let out = finde(dir.path(), &["--config", "bad.json", "generate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trian"));

    fs::write(dir.path().join("broken.json"), "{").unwrap();
    assert_eq!(
        finde(dir.path(), &["--config", "broken.json", "generate"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        finde(dir.path(), &["--config", "missing.json", "generate"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        finde(dir.path(), &["--system", "three-body", "generate"]).status.code(),
        Some(2)
    );
    assert_eq!(finde(dir.path(), &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_with_3() {
    let dir = tiny_dir();
    ok(&finde(dir.path(), &["--config", "c.json", "generate"]));
    let out = finde(
        dir.path(),
        &["--config", "c.json", "eval", "--checkpoint", "nope.finde"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.finde"));
}

#[test]
fn demo_writes_the_energy_trace() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&finde(
        dir.path(),
        &["demo-mass-spring", "--finde", "dfinde", "--out", "demo.csv"],
    ));
    assert!(stdout.contains("501 rows"), "{stdout}");
    let mut rows = csv::Reader::from_path(dir.path().join("demo.csv")).unwrap();
    assert_eq!(rows.headers().unwrap(), vec!["t", "q", "v", "E", "q_exact", "v_exact"]);
    let mut count = 0;
    for r in rows.records() {
        let e: f64 = r.unwrap()[3].parse().unwrap();
        assert!((e - 0.5).abs() <= 1e-10);
        count += 1;
    }
    assert_eq!(count, 501);
}

#[test]
fn train_predict_eval_and_sweep_run_end_to_end() {
    let dir = tiny_dir();
    let d = dir.path();
    ok(&finde(d, &["--config", "c.json", "generate"]));
    let stdout = ok(&finde(d, &["--config", "c.json", "train"]));
    assert!(stdout.contains("trained 20 iterations"), "{stdout}");
    for file in ["config.json", "losses.csv", "model.finde"] {
        assert!(d.join("run").join(file).exists(), "{file}");
    }

    ok(&finde(
        d,
        &["--config", "c.json", "predict", "--series", "1", "--steps", "10"],
    ));
    let predicted = fs::read_to_string(d.join("run/predict.csv")).unwrap();
    assert_eq!(predicted.lines().count(), 12);

    let stdout = ok(&finde(d, &["--config", "c.json", "eval"]));
    assert!(stdout.contains("median VPT"), "{stdout}");
    let learned = fs::read_to_string(d.join("run/eval/learned_v.csv")).unwrap();
    assert!(learned.starts_with("series,step,u0,u1,u2,u3,V0"));
    assert_eq!(learned.lines().count(), 1 + 2 * 31);

    let stdout = ok(&finde(d, &["--config", "c.json", "sweep"]));
    assert!(stdout.contains("K=0") && stdout.contains("K=1"), "{stdout}");
    let sweep = fs::read_to_string(d.join("run/sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
}
