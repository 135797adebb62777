//! End-to-end runs of the `padd` binary on tiny configs.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::tiny_pipeline_toml;
use padd::checkpoint::{decode, encode};
use padd::distill::{LogRecord, Phase};

const STAGE_FILES: [&str; 6] = ["teacher", "32", "8", "4", "2", "1"];

fn padd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_padd"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Writes the tiny config into `dir` and runs `distill` into `dir/run`.
fn distill(dir: &Path, iters: usize) -> PathBuf {
    fs::write(dir.join("cfg.toml"), tiny_pipeline_toml(iters)).unwrap();
    ok(&padd(dir, &["distill", "--config", "cfg.toml", "--out", "run"]));
    dir.join("run")
}

fn ckpt(run: &Path, stage: &str) -> PathBuf {
    run.join(format!("stage-{stage}.ckpt"))
}

fn read_log(run: &Path) -> Vec<LogRecord> {
    fs::read_to_string(run.join("train.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("every line is a record"))
        .collect()
}

#[test]
fn zero_iteration_distill_writes_every_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = distill(dir.path(), 0);
    for s in STAGE_FILES {
        assert!(ckpt(&run, s).is_file(), "missing checkpoint for {s}");
    }
    assert!(!read_log(&run).is_empty());
}

#[test]
fn distill_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (distill(a.path(), 3), distill(b.path(), 3));
    assert_eq!(
        fs::read(ra.join("train.jsonl")).unwrap(),
        fs::read(rb.join("train.jsonl")).unwrap()
    );
    for s in STAGE_FILES {
        assert_eq!(
            fs::read(ckpt(&ra, s)).unwrap(),
            fs::read(ckpt(&rb, s)).unwrap(),
            "stage {s}"
        );
    }
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = distill(dir.path(), 3);
    ok(&padd(
        dir.path(),
        &[
            "train-teacher",
            "--config",
            "cfg.toml",
            "--seed",
            "99",
            "--out",
            "other",
        ],
    ));
    assert_ne!(
        fs::read(ckpt(&run, "teacher")).unwrap(),
        fs::read(ckpt(&dir.path().join("other"), "teacher")).unwrap()
    );
}

#[test]
fn checkpoints_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let run = distill(dir.path(), 2);
    for s in STAGE_FILES {
        let bytes = fs::read(ckpt(&run, s)).unwrap();
        let (net, meta) = decode(&bytes).unwrap();
        assert_eq!(encode(&net, &meta).unwrap(), bytes, "stage {s}");
    }
}

#[test]
fn log_follows_the_stage_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let log = read_log(&distill(dir.path(), 2));
    let stages: Vec<&str> = log
        .iter()
        .filter_map(|r| match r {
            LogRecord::StageStart { stage, .. } => Some(stage.as_str()),
            _ => None,
        })
        .collect();
    assert_eq!(stages, STAGE_FILES);
    let conversion = log
        .iter()
        .position(|r| matches!(r, LogRecord::X0Conversion { .. }))
        .unwrap();
    let last = log
        .iter()
        .position(|r| matches!(r, LogRecord::StageStart { stage, .. } if stage == "1"))
        .unwrap();
    assert!(
        conversion > last,
        "conversion runs inside the 2->1 stage before training"
    );
    let training = log[last..]
        .iter()
        .position(|r| {
            matches!(
                r,
                LogRecord::PhaseStart {
                    phase: Phase::Conditional,
                    ..
                }
            )
        })
        .unwrap();
    assert!(conversion < last + training);
}

#[test]
fn sample_eval_sdedit_and_plot_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = distill(dir.path(), 2);
    let eight = ckpt(&run, "8");
    let teacher = ckpt(&run, "teacher");
    let (e, t) = (eight.to_str().unwrap(), teacher.to_str().unwrap());
    for out in ["s1", "s2"] {
        ok(&padd(
            dir.path(),
            &[
                "sample",
                "--checkpoint",
                e,
                "--seed",
                "5",
                "--count",
                "50",
                "--out",
                out,
            ],
        ));
        ok(&padd(
            dir.path(),
            &[
                "eval",
                "--checkpoint",
                e,
                "--teacher",
                t,
                "--config",
                "cfg.toml",
                "--out",
                out,
            ],
        ));
        ok(&padd(
            dir.path(),
            &[
                "sdedit",
                "--checkpoint",
                t,
                "--t-start",
                "500",
                "--steps",
                "8",
                "--count",
                "40",
                "--out",
                &format!("{out}/edit"),
            ],
        ));
        ok(&padd(
            dir.path(),
            &[
                "plot",
                "--samples",
                &format!("{out}/samples.csv"),
                "--out",
                &format!("{out}/plot"),
            ],
        ));
    }
    for f in [
        "samples.csv",
        "metrics.json",
        "scatter.svg",
        "edit/samples.csv",
        "plot/scatter.svg",
    ] {
        let a = fs::read(dir.path().join("s1").join(f)).unwrap();
        let b = fs::read(dir.path().join("s2").join(f)).unwrap();
        assert!(!a.is_empty(), "{f} is empty");
        assert_eq!(a, b, "{f} differs");
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("s1/metrics.json")).unwrap()).unwrap();
    assert!(metrics["sliced_wasserstein"].as_f64().unwrap() >= 0.0);
    assert_eq!(metrics["step_count"].as_u64(), Some(8));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(padd(dir.path(), &["sample", "--bogus"]).status.code(), Some(2));
    assert_eq!(padd(dir.path(), &["nonsense"]).status.code(), Some(2));
    assert_eq!(padd(dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn bad_configs_name_the_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_pipeline_toml(0);
    cfg = cfg.replacen("student_steps = 8", "student_steps = 5", 1);
    fs::write(dir.path().join("bad.toml"), cfg).unwrap();
    let out = padd(dir.path(), &["distill", "--config", "bad.toml", "--out", "run"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stages[1]") && err.contains("32->5"), "{err}");

    fs::write(
        dir.path().join("typo.toml"),
        tiny_pipeline_toml(0) + "learning_rat = 1.0\n",
    )
    .unwrap();
    let out = padd(dir.path(), &["distill", "--config", "typo.toml", "--out", "run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = padd(dir.path(), &["sample", "--checkpoint", "nope.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
}
