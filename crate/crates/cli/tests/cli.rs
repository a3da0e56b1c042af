use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn taskclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taskclip"))
        .args(args)
        .env_remove("TASKCLIP_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Vec<Value> {
    let out = taskclip(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn err(args: &[&str]) -> (i32, Value) {
    let out = taskclip(args);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    (out.status.code().unwrap(), serde_json::from_str(stderr.trim()).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&["synth", "--seed", "7", "--out", p(dir)]);
}

fn small_train(dir: &Path) {
    let (train, tasks, ckpt) = (dir.join("train.jsonl"), dir.join("tasks"), dir.join("model.ckpt"));
    ok(&[
        "train", "--train", p(&train), "--tasks", p(&tasks), "--out", p(&ckpt),
        "--preset", "synthetic", "--epochs", "3", "--layers", "2", "--heads", "2", "--score-dim", "64",
    ]);
}

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    small_train(d);
    assert!(fs::read_to_string(d.join("loss.csv")).unwrap().starts_with("epoch,mean_loss\n1,"));

    let (ckpt, tasks) = (d.join("model.ckpt"), d.join("tasks"));
    let lines = ok(&[
        "calibrate", "--model", p(&ckpt), "--scenes", p(&d.join("val.jsonl")), "--tasks", p(&tasks),
        "--out", p(&d.join("thresholds.json")), "--details", p(&d.join("calibration.json")),
    ]);
    assert_eq!(lines[0]["command"], "calibrate");
    assert!(lines[1]["result"]["mean_threshold"].is_number());

    ok(&[
        "infer", "--model", p(&ckpt), "--scenes", p(&d.join("test.jsonl")), "--tasks", p(&tasks),
        "--thresholds", p(&d.join("thresholds.json")), "--grouping", "--out", p(&d.join("preds.jsonl")),
    ]);
    let lines = ok(&[
        "eval", "--preds", p(&d.join("preds.jsonl")), "--scenes", p(&d.join("test.jsonl")),
        "--out", p(&d.join("report.json")),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report, lines[1]["result"]);
    assert!(report["map"].is_number());
    assert_eq!(report["per_task"].as_object().unwrap().len(), 3);
}

#[test]
fn threshold_file_overrides_global_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    small_train(d);
    fs::write(d.join("t.json"), r#"{"1": 0.0, "2": 1.0}"#).unwrap();
    ok(&[
        "infer", "--model", p(&d.join("model.ckpt")), "--scenes", p(&d.join("test.jsonl")),
        "--tasks", p(&d.join("tasks")), "--threshold", "0.5", "--thresholds", p(&d.join("t.json")),
        "--out", p(&d.join("preds.jsonl")),
    ]);
    for line in fs::read_to_string(d.join("preds.jsonl")).unwrap().lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        let expected = match rec["task_id"].as_u64().unwrap() {
            1 => 0.0,
            2 => 1.0,
            _ => 0.5,
        };
        assert_eq!(rec["threshold"].as_f64().unwrap(), expected);
    }
}

#[test]
fn without_grouping_every_record_is_direct() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    small_train(d);
    ok(&[
        "infer", "--model", p(&d.join("model.ckpt")), "--scenes", p(&d.join("test.jsonl")),
        "--tasks", p(&d.join("tasks")), "--threshold", "0.15", "--out", p(&d.join("preds.jsonl")),
    ]);
    let text = fs::read_to_string(d.join("preds.jsonl")).unwrap();
    let mut boxes = 0;
    for line in text.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        for b in rec["boxes"].as_array().unwrap() {
            assert_eq!(b["provenance"], "direct");
            boxes += 1;
        }
    }
    assert!(boxes > 0);
}

#[test]
fn gradcheck_passes_on_defaults() {
    let lines = ok(&["gradcheck"]);
    let result = &lines[1]["result"];
    assert_eq!(result["passed"], true);
    assert!(result["worst_rel_error"].as_f64().unwrap() <= 1e-4);
    assert_eq!(result["blocks"].as_array().unwrap().len(), 5);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        synth(d);
        small_train(d);
        ok(&[
            "infer", "--model", p(&d.join("model.ckpt")), "--scenes", p(&d.join("test.jsonl")),
            "--tasks", p(&d.join("tasks")), "--out", p(&d.join("preds.jsonl")),
        ]);
    }
    for name in ["train.jsonl", "model.ckpt", "loss.csv", "preds.jsonl"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn errors_are_json_with_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, e) = err(&["eval", "--preds", p(&d.join("absent.jsonl")), "--scenes", p(&d.join("absent.jsonl"))]);
    assert_eq!((code, e["error"].as_str().unwrap()), (3, "io"));

    fs::write(d.join("bad.jsonl"), "{not json\n").unwrap();
    let (code, e) = err(&["eval", "--preds", p(&d.join("bad.jsonl")), "--scenes", p(&d.join("bad.jsonl"))]);
    assert_eq!((code, e["error"].as_str().unwrap()), (4, "parse"));

    fs::create_dir(d.join("tasks")).unwrap();
    fs::write(d.join("tasks/task_1.json"), r#"{"task_id": 1}"#).unwrap();
    let (code, e) = err(&["train", "--train", p(&d.join("bad.jsonl")), "--tasks", p(&d.join("tasks"))]);
    assert_eq!((code, e["error"].as_str().unwrap()), (4, "parse"));

    let out = Command::new(env!("CARGO_BIN_EXE_taskclip"))
        .args(["gradcheck"])
        .env("TASKCLIP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));

    assert_eq!(taskclip(&["synth", "--no-such-flag"]).status.code(), Some(2));
}
