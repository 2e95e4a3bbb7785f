use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mstrnn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mstrnn"))
        .args(args)
        .current_dir(dir)
        .env_remove("MSTRNN_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn err(out: &Output) -> String {
    assert!(!out.status.success());
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Writes a small concat3 dataset and a run config around it.
fn setup(subjects: usize, kind: &str, epochs: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = format!(r#"{{"task": "concat3", "subjects": {subjects}, "frames_per_primitive": 2, "height": 26, "width": 26, "seed": 3}}"#);
    fs::write(dir.path().join("spec.json"), spec).unwrap();
    ok(&mstrnn(&["gen-data", "--spec", "spec.json", "--out", "data"], dir.path()));
    let cfg = format!(
        r#"{{"seed": 1, "output_dir": "out", "dataset": {{"path": "data"}},
            "model": {{"kind": "{kind}"}},
            "training": {{"epochs": {epochs}, "crop_margin": 2, "delay": 2, "batch_size": 4}}}}"#
    );
    fs::write(dir.path().join("run.json"), cfg).unwrap();
    dir
}

#[test]
fn gen_data_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("spec.json"),
        r#"{"task": "concat3", "subjects": 9, "frames_per_primitive": 1}"#,
    )
    .unwrap();
    let stdout = ok(&mstrnn(&["gen-data", "--spec", "spec.json", "--out", "a"], dir.path()));
    assert!(stdout.starts_with("243 samples"), "{stdout}");
    ok(&mstrnn(&["gen-data", "--spec", "spec.json", "--out", "b"], dir.path()));
    assert_eq!(tree(&dir.path().join("a")), tree(&dir.path().join("b")));

    let e = err(&mstrnn(&["gen-data", "--spec", "spec.json", "--out", "a"], dir.path()));
    assert!(e.contains("--force"), "{e}");
    ok(&mstrnn(&["gen-data", "--spec", "spec.json", "--out", "a", "--force"], dir.path()));
}

#[test]
fn bad_specs_and_configs_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), r#"{"task": "concat4"}"#).unwrap();
    let e = err(&mstrnn(&["gen-data", "--spec", "spec.json", "--out", "x"], dir.path()));
    assert!(e.contains("`task`"), "{e}");

    let dir = setup(1, "mstrnn", 1);
    fs::write(
        dir.path().join("bad.json"),
        r#"{"output_dir": "o", "dataset": {"path": "data"}, "training": {"epochs": 1, "lr": 0.1}}"#,
    )
    .unwrap();
    let e = err(&mstrnn(&["train", "--config", "bad.json"], dir.path()));
    assert!(e.contains("`training.lr`"), "{e}");

    let e = err(&mstrnn(&["train", "--config", "missing.json"], dir.path()));
    assert!(e.contains("missing.json"), "{e}");
    let e = err(&mstrnn(&["frobnicate"], dir.path()));
    assert!(e.contains("frobnicate"), "{e}");
}

#[test]
fn train_writes_artifacts_and_reruns_reproduce() {
    let dir = setup(1, "mstnn", 2);
    ok(&mstrnn(&["train", "--config", "run.json"], dir.path()));
    let out = dir.path().join("out");
    for f in ["effective_config.json", "model_spec.json", "train_log.csv", "final.ckpt", "checkpoints/best.ckpt"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let effective = fs::read_to_string(out.join("effective_config.json")).unwrap();
    assert!(effective.contains("\"kind\": \"mstnn\""));
    assert!(effective.contains("\"version\""));
    assert!(effective.contains("\"lr0\": 0.01"));

    // The effective config alone reproduces the run.
    let again = dir.path().join("again");
    let cfg = effective.replace(out.to_str().unwrap(), again.to_str().unwrap());
    fs::write(dir.path().join("effective.json"), cfg).unwrap();
    ok(&mstrnn(&["train", "--config", "effective.json"], dir.path()));
    let losses = |p: &Path| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().to_string())
            .collect()
    };
    assert_eq!(losses(&out.join("train_log.csv")), losses(&again.join("train_log.csv")));
    assert_eq!(fs::read(out.join("final.ckpt")).unwrap(), fs::read(again.join("final.ckpt")).unwrap());
}

#[test]
fn output_dir_env_override() {
    let dir = setup(1, "mstrnn", 1);
    let elsewhere = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_mstrnn"))
        .args(["train", "--config", "run.json"])
        .current_dir(dir.path())
        .env("MSTRNN_OUT_DIR", &elsewhere)
        .output()
        .unwrap();
    ok(&out);
    assert!(elsewhere.join("final.ckpt").is_file());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn losocv_emits_one_report_per_subject() {
    let dir = setup(6, "mstrnn", 1);
    let stdout = ok(&mstrnn(&["losocv", "--config", "run.json"], dir.path()));
    assert!(stdout.contains("mean"), "{stdout}");
    let out = dir.path().join("out");
    for s in 0..6 {
        assert!(out.join(format!("fold_{s}/report.json")).is_file());
        assert!(out.join(format!("fold_{s}/train_log.csv")).is_file());
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 6);
    assert!(out.join("report.txt").is_file());
}

#[test]
fn untrained_model_scores_chance() {
    let dir = setup(2, "mstrnn", 0);
    ok(&mstrnn(&["train", "--config", "run.json"], dir.path()));
    ok(&mstrnn(&["eval", "--config", "run.json", "--checkpoint", "out/final.ckpt"], dir.path()));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/eval_report.json")).unwrap()).unwrap();
    let joint = report["joint_accuracy"].as_f64().unwrap();
    assert!((joint - 100.0 / 27.0).abs() <= 3.0, "joint {joint}");

    // A checkpoint for another architecture is refused.
    fs::write(
        dir.path().join("lrcn.json"),
        r#"{"output_dir": "o2", "dataset": {"path": "data"}, "model": {"kind": "lrcn"}, "training": {"crop_margin": 2}}"#,
    )
    .unwrap();
    let e = err(&mstrnn(&["eval", "--config", "lrcn.json", "--checkpoint", "out/final.ckpt"], dir.path()));
    assert!(e.contains("different model spec"), "{e}");
}

#[test]
fn analyze_writes_trajectories() {
    let dir = setup(1, "mstrnn", 1);
    ok(&mstrnn(&["train", "--config", "run.json"], dir.path()));
    ok(&mstrnn(&["analyze", "--config", "run.json", "--checkpoint", "out/final.ckpt"], dir.path()));
    let traj = dir.path().join("out/trajectories");
    let csv = fs::read_to_string(traj.join("sample_0000.csv")).unwrap();
    // T = 3 primitives × 2 frames, plus a delay of 2.
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(traj.join("basis.bin").is_file());
    assert!(traj.join("trajectories.json").is_file());
    let first = tree(&traj);
    ok(&mstrnn(&["analyze", "--config", "run.json", "--checkpoint", "out/final.ckpt"], dir.path()));
    assert_eq!(first, tree(&traj));
}
