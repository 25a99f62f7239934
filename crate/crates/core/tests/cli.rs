use std::path::Path;
use std::process::{Command, Output};

use mmvsr::codec::{load_video, save_video, VideoTensor};
use mmvsr::degrade::{load_corpus, Task};
use serde_json::Value;

const TRAIN_TOML: &str = r#"
seed = 2
lr = 0.001
checkpoint_dir = "ckpt"
log_path = "loss.jsonl"
checkpoint_every = 2
[corpora]
t2v = "corpus"
[[stages]]
stage_id = 1
frames = 2
tasks = ["t2v"]
probabilities = [1.0]
step_budget = 4
[model]
model_dim = 24
heads = 2
blocks = 1
text_dim = 8
freq_dim = 8
"#;

fn mmvsr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmvsr")).args(args).current_dir(dir).output().unwrap()
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = mmvsr(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_category(out: &Output) -> String {
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    v["error"]["category"].as_str().unwrap().to_string()
}

fn degrade_and_train(dir: &Path) {
    ok_json(dir, &["degrade", "--task", "t2v", "--count", "2", "--frames", "2", "--preset", "light", "--out", "corpus"]);
    std::fs::write(dir.join("train.toml"), TRAIN_TOML).unwrap();
    ok_json(dir, &["train", "--config", "train.toml"]);
}

#[test]
fn degrade_writes_loadable_corpus() {
    let dir = tempfile::tempdir().unwrap();
    ok_json(dir.path(), &["degrade", "--task", "edit", "--count", "3", "--frames", "2", "--out", "c"]);
    let (manifest, samples) = load_corpus(&dir.path().join("c")).unwrap();
    assert_eq!(manifest.samples.len(), 3);
    assert!(!manifest.sdedit_model);
    assert!(samples.iter().all(|s| s.task == Task::Edit && s.edit_aligned()));
    assert!(dir.path().join("c/0000_hr.json").exists());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    degrade_and_train(dir.path());
    let full = std::fs::read(dir.path().join("ckpt/final/params.umvt")).unwrap();
    std::fs::remove_dir_all(dir.path().join("ckpt/final")).unwrap();
    ok_json(dir.path(), &["train", "--resume", "ckpt/step_000002"]);
    assert_eq!(std::fs::read(dir.path().join("ckpt/final/params.umvt")).unwrap(), full);
}

#[test]
fn generate_from_request_file() {
    let dir = tempfile::tempdir().unwrap();
    degrade_and_train(dir.path());
    std::fs::write(dir.path().join("req.json"), r#"{"task": "t2v", "prompt": "a blue square", "lr_video": "corpus/0001_lr.umvt"}"#)
        .unwrap();
    let report = ok_json(
        dir.path(),
        &["generate", "--model", "ckpt/final", "--request", "req.json", "--steps", "2", "--n-ref", "1", "--scale", "4", "--out", "hr.umvt", "--lr-out", "lr.umvt"],
    );
    assert!(report.is_object());
    let (lr, _) = load_video(dir.path().join("lr.umvt")).unwrap();
    let (hr, desc) = load_video(dir.path().join("hr.umvt")).unwrap();
    assert_eq!(hr.dims(), [lr.frames(), 3, lr.height() * 4, lr.width() * 4]);
    assert!(desc.is_some());
}

#[test]
fn error_categories() {
    let dir = tempfile::tempdir().unwrap();
    degrade_and_train(dir.path());
    let out = mmvsr(dir.path(), &["generate", "--model", "ckpt/final", "--task", "multi_id", "--prompt", "x", "--lr", "corpus/0000_lr.umvt", "--out", "o.umvt"]);
    assert_eq!(out.status.code(), Some(7));
    assert_eq!(error_category(&out), "contract");

    save_video(dir.path().join("small.umvt"), &VideoTensor::full(2, 3, 8, 8, 0.5), 8.0).unwrap();
    let out = mmvsr(dir.path(), &["eval", "--pred", "small.umvt", "--target", "corpus/0000_hr.umvt"]);
    assert_eq!(out.status.code(), Some(6));
    assert_eq!(error_category(&out), "shape");

    let out = mmvsr(dir.path(), &["degrade", "--task", "t2v", "--preset", "bogus", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_reports_masked_psnr() {
    let dir = tempfile::tempdir().unwrap();
    ok_json(dir.path(), &["degrade", "--task", "edit", "--count", "1", "--frames", "2", "--out", "c"]);
    let v = ok_json(dir.path(), &["eval", "--pred", "c/0000_ref.umvt", "--target", "c/0000_hr.umvt", "--mask", "c/0000_mask.umvt", "--out", "m.json"]);
    // the reference equals the target outside the edit mask
    assert_eq!(v["masked_psnr_db"].as_f64().unwrap(), mmvsr::harness::PSNR_CAP_DB);
    assert!(v["psnr_db"].as_f64().unwrap() < mmvsr::harness::PSNR_CAP_DB);
    assert!(dir.path().join("m.json").exists());
}
