use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn elastireg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elastireg"))
        .current_dir(dir)
        .env_remove("ELASTIREG_JOBS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn json_stdout(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn phantom(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "phantom", "--out", "data", "--dims", "32,32", "--count", "2",
    ];
    args.extend_from_slice(extra);
    json_stdout(&elastireg(dir, &args));
}

#[test]
fn identity_phantom_registers_to_full_overlap() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), &["--field", "identity"]);
    let out = elastireg(
        dir.path(),
        &[
            "register",
            "--case",
            "data/case_000/case.cfg",
            "--steps",
            "50",
            "--out",
            "reg",
        ],
    );
    let m = json_stdout(&out);
    assert!(m["dice_mean"].as_f64().unwrap() >= 0.99, "{m}");
    assert!(dir.path().join("reg/field.rvol").exists());
    assert!(dir.path().join("reg/result.json").exists());
}

#[test]
fn zero_field_on_identical_images_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), &["--field", "identity"]);
    let reg = elastireg(
        dir.path(),
        &[
            "register",
            "--case",
            "data/case_000/case.cfg",
            "--steps",
            "1",
            "--lr",
            "0",
            "--out",
            "reg",
        ],
    );
    json_stdout(&reg);
    let m = json_stdout(&elastireg(
        dir.path(),
        &[
            "evaluate",
            "--case",
            "data/case_000/case.cfg",
            "--field",
            "reg/field.rvol",
        ],
    ));
    assert_eq!(m["tre_mean_mm"].as_f64().unwrap(), 0.0);
    assert_eq!(m["neg_jac_fraction"].as_f64().unwrap(), 0.0);
    assert_eq!(m["dice_mean"].as_f64().unwrap(), 1.0);
}

#[test]
fn tenth_resolution_sweep_writes_every_combo() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), &["--amplitude", "2", "--sigma", "5"]);
    let out = elastireg(
        dir.path(),
        &[
            "sweep",
            "--corpus",
            "data",
            "--resolution",
            "0.1",
            "--steps",
            "5",
            "--out",
            "sw",
        ],
    );
    let sel = json_stdout(&out);
    assert!(sel["sweep"]["dice"].is_object());
    assert!(sel["sweep"]["tre"].is_object());
    let csv = std::fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("lambda,mu,dice_mean,tre_mean_mm,neg_jac_fraction")
    );
    assert_eq!(lines.count(), 66);
}

#[test]
fn amortized_sweep_runs_from_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), &["--amplitude", "2", "--sigma", "5"]);
    let t = json_stdout(&elastireg(
        dir.path(),
        &[
            "train",
            "--corpus",
            "data",
            "--steps",
            "20",
            "--out",
            "m.ckpt",
            "--trace",
            "trace.json",
        ],
    ));
    assert_eq!(t["steps"], 20);
    let trace: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["loss"].as_array().unwrap().len(), 20);

    let start = std::time::Instant::now();
    json_stdout(&elastireg(
        dir.path(),
        &[
            "sweep",
            "--corpus",
            "data",
            "--engine",
            "amortized",
            "--model",
            "m.ckpt",
            "--out",
            "sa",
        ],
    ));
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let csv = std::fs::read_to_string(dir.path().join("sa/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 67);
}

#[test]
fn runs_are_reproducible_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), &["--seed", "11"]);
    let run = |out: &str| {
        json_stdout(&elastireg(
            dir.path(),
            &[
                "sweep",
                "--corpus",
                "data",
                "--resolution",
                "0.5",
                "--steps",
                "10",
                "--out",
                out,
            ],
        ));
        std::fs::read(dir.path().join(out).join("sweep.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), &[]);
    std::fs::write(
        dir.path().join("run.cfg"),
        "resolution=0.5\nsteps=5\nheuristic=dice\n",
    )
    .unwrap();
    let sel = json_stdout(&elastireg(
        dir.path(),
        &[
            "--config", "run.cfg", "sweep", "--corpus", "data", "--out", "sw",
        ],
    ));
    assert!(sel["sweep"]["tre"].is_null());
    let csv = std::fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = elastireg(dir.path(), &["register", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failures_are_reported_as_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = elastireg(
        dir.path(),
        &["evaluate", "--case", "missing.cfg", "--field", "f.rvol"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("missing.cfg"));
}

#[test]
fn mismatched_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), &[]);
    json_stdout(&elastireg(
        dir.path(),
        &["phantom", "--out", "small", "--dims", "16,16"],
    ));
    let out = elastireg(
        dir.path(),
        &[
            "evaluate",
            "--case",
            "data/case_000/case.cfg",
            "--field",
            "small/case_000/true_field.rvol",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "shape");
}
