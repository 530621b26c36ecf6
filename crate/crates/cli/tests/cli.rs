use std::path::Path;
use std::process::{Command, Output};

fn pkdistill(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pkdistill"))
        .args(args)
        .current_dir(dir)
        .env_remove("PKDISTILL_WORKDIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_SPEC: &str = r#"{"domain_name":"T","n_days":2,"n_angles":1,"images_per_day":1,"spots_per_image":4,"occupancy_rate":0.5,"seed":5}"#;

#[test]
fn unknown_command_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(pkdistill(d.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn schema_errors_exit_3_on_one_line() {
    let d = tempfile::tempdir().unwrap();
    let o = pkdistill(d.path(), &["evaluate", "--set", "experiment.tau=1.5"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[config]"), "{err}");

    std::fs::write(d.path().join("run.json"), r#"{"sorce": "x"}"#).unwrap();
    let o = pkdistill(d.path(), &["evaluate", "--config", "run.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("sorce"));
}

#[test]
fn missing_manifest_key_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let o = pkdistill(d.path(), &["train-teacher"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("--set source="), "{}", stderr(&o));
}

#[test]
fn synth_twice_is_up_to_date_with_the_same_digest() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("t.json"), TINY_SPEC).unwrap();
    let first = pkdistill(d.path(), &["synth", "--spec", "t.json", "--out", "data/T"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let second = pkdistill(d.path(), &["synth", "--spec", "t.json", "--out", "data/T"]);
    assert!(second.status.success());
    let (a, b) = (stdout(&first), stdout(&second));
    assert!(a.contains("wrote 2 images"), "{a}");
    assert!(b.contains("up-to-date"), "{b}");
    assert_eq!(a.lines().next(), b.lines().next());
    assert!(a.lines().next().unwrap().starts_with("seed=5 digest="));
}

#[test]
fn evaluate_without_teacher_names_the_ensemble_path() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("t.json"), TINY_SPEC).unwrap();
    assert!(pkdistill(d.path(), &["synth", "--spec", "t.json", "--out", "data/T"]).status.success());
    let o = pkdistill(
        d.path(),
        &[
            "evaluate",
            "--set",
            "source=data/T/manifest.jsonl",
            "--set",
            "target=data/T/manifest.jsonl",
            "--seed",
            "3",
            "--workdir",
            "w",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("/seed-3/ensemble/ensemble.json"), "{err}");
    assert!(err.contains("train-teacher"), "{err}");
    assert!(stdout(&o).starts_with("seed=3 digest="));
}

#[test]
fn locked_workdir_is_refused() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("t.json"), TINY_SPEC).unwrap();
    assert!(pkdistill(d.path(), &["synth", "--spec", "t.json", "--out", "data/T"]).status.success());
    std::fs::create_dir_all(d.path().join("w")).unwrap();
    std::fs::write(d.path().join("w/.pkdistill.lock"), "1\n").unwrap();
    let o = pkdistill(
        d.path(),
        &["train-teacher", "--set", "source=data/T/manifest.jsonl", "--workdir", "w"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}

#[test]
fn workdir_falls_back_to_environment() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pkdistill"))
        .args(["evaluate", "--set", "source=nope.jsonl"])
        .current_dir(d.path())
        .env("PKDISTILL_WORKDIR", d.path().join("envwork"))
        .output()
        .unwrap();
    // Fails on the missing manifest, after resolving the work dir.
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nope.jsonl"));
}

#[test]
fn cost_prints_the_bandwidth_summary() {
    let d = tempfile::tempdir().unwrap();
    let o = pkdistill(d.path(), &["cost"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("1000 cams @ 30s × 292KB ≈ 35.0 GB/h"), "{out}");
    let o = pkdistill(d.path(), &["cost", "--set", "cost.bandwidth.n_cameras=2000"]);
    assert!(stdout(&o).contains("≈ 70.0 GB/h"));
}
