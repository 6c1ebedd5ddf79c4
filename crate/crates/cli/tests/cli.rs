use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn geomoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geomoe")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = geomoe(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// Small labelled archive plus a tiny checkpoint trained on it.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("d.gma");
    let ckpt = dir.join("m.ckpt");
    ok(&["gen-data", "--count", "48", "--height", "16", "--width", "16", "--seed", "5", "--out", s(&data)]);
    ok(&["pretrain", "--data", s(&data), "--profile", "tiny", "--epochs", "2", "--batch-size", "16", "--seed", "3", "--out", s(&ckpt)]);
    (data, ckpt)
}

#[test]
fn gen_data_defaults_and_empty_archive() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.gma");
    ok(&["gen-data", "--count", "3", "--out", s(&out)]);
    let archive = geomoe::data::load_archive(&out).unwrap();
    let h = &archive.header;
    assert_eq!((h.height, h.width, h.bands, h.count), (40, 40, 7, 3));
    let empty = dir.path().join("e.gma");
    ok(&["gen-data", "--count", "0", "--out", s(&empty)]);
    assert!(geomoe::data::load_archive(&empty).unwrap().is_empty());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(geomoe(&["gen-data", "--count", "3"]).status.code(), Some(2));
    assert_eq!(geomoe(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(geomoe(&["sparsity", "--profile", "huge", "--out", "/dev/null"]).status.code(), Some(2));
    assert_eq!(geomoe(&["gen-data", "--classes", "1", "--out", "/dev/null"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    let missing = dir.path().join("missing.ckpt");
    let out = geomoe(&["embed", "--checkpoint", s(&missing), "--data", s(&data), "--out", s(&dir.path().join("e.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    // Default profile expects 40x40 chips.
    let out = geomoe(&["pretrain", "--data", s(&data), "--epochs", "1", "--out", s(&dir.path().join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("16x16x7"));
    let out = geomoe(&[
        "pretrain", "--data", s(&data), "--profile", "tiny", "--epochs", "2", "--batch-size", "16", "--lr", "1e30",
        "--out", s(&dir.path().join("nan.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn pretrain_is_reproducible_and_manifested() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let again = dir.path().join("again.ckpt");
    ok(&["pretrain", "--data", s(&data), "--profile", "tiny", "--epochs", "2", "--batch-size", "16", "--seed", "3", "--out", s(&again)]);
    let metrics = |p: &Path| std::fs::read(format!("{}.metrics.csv", p.display())).unwrap();
    assert_eq!(metrics(&ckpt), metrics(&again));
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

    let manifest = json(&dir.path().join("m.ckpt.manifest.json"));
    assert_eq!(manifest["subcommand"], "pretrain");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["train"]["epochs"], 2);
    assert_eq!(manifest["config"]["train"]["base_lr"], 3e-4);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 2);
    let digest = &outputs[0]["sha256"];
    let other = json(&dir.path().join("again.ckpt.manifest.json"));
    assert_eq!(digest, &other["outputs"][0]["sha256"]);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.gma");
    ok(&["gen-data", "--count", "16", "--height", "16", "--width", "16", "--out", s(&data)]);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"profile": "tiny", "train": {"epochs": 3, "batch_size": 8, "alpha": 0.2}}"#).unwrap();
    let out = dir.path().join("m.ckpt");
    ok(&["pretrain", "--data", s(&data), "--config", s(&cfg), "--epochs", "1", "--out", s(&out)]);
    let manifest = json(&dir.path().join("m.ckpt.manifest.json"));
    let train = &manifest["config"]["train"];
    assert_eq!(train["epochs"], 1);
    assert_eq!(train["batch_size"], 8);
    assert_eq!(train["alpha"], 0.2);
    assert_eq!(manifest["config"]["model"]["alpha"], 0.2);
    assert_eq!(manifest["config"]["model"]["dim"], 8);
    let csv = std::fs::read_to_string(format!("{}.metrics.csv", out.display())).unwrap();
    assert_eq!(csv.lines().count(), 2);

    std::fs::write(&cfg, r#"{"trian": {}}"#).unwrap();
    let bad = geomoe(&["pretrain", "--data", s(&data), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn embed_probe_analyze_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let p = dir.path();

    let raw = p.join("emb.f32");
    ok(&["embed", "--checkpoint", s(&ckpt), "--data", s(&data), "--mode", "all", "--out", s(&raw)]);
    let emb = geomoe::probe::load_embeddings_raw(&raw).unwrap();
    assert_eq!(emb.features.shape(), (48, 21 * 8));

    let report = p.join("probe.json");
    ok(&["probe", "--checkpoint", s(&ckpt), "--data", s(&data), "--mode", "all", "--out", s(&report), "--csv", s(&p.join("probe.csv"))]);
    let r = json(&report);
    assert!(r["overall_accuracy"].is_number());
    assert_eq!(r["samples"], 12);
    assert!(std::fs::read_to_string(p.join("probe.csv")).unwrap().starts_with("metric,value\n"));

    let an = p.join("an");
    ok(&["analyze", "--checkpoint", s(&ckpt), "--data", s(&data), "--chip", "2", "--layer", "1", "--ppm", "--out-dir", s(&an)]);
    let contrib = std::fs::read_to_string(an.join("contribution.csv")).unwrap();
    assert!(contrib.starts_with("row,col,expert,value\n"));
    assert_eq!(contrib.lines().count(), 1 + 16 * 3);
    assert!(std::fs::read_to_string(an.join("ablation.csv")).unwrap().starts_with("row,col,expert,delta\n"));
    let hist = json(&an.join("histogram.json"));
    let counts: u64 = hist["counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(counts, 2 * 48 * 21);
    assert!(std::fs::read(an.join("top1.ppm")).unwrap().starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(json(&an.join("manifest.json"))["outputs"].as_array().unwrap().len(), 4 + 1 + 6);
    let out = geomoe(&["analyze", "--checkpoint", s(&ckpt), "--data", s(&data), "--layer", "9", "--out-dir", s(&an)]);
    assert_eq!(out.status.code(), Some(2));

    let rc = p.join("rc");
    ok(&["reconstruct", "--checkpoint", s(&ckpt), "--data", s(&data), "--mask", "0", "--out-dir", s(&rc)]);
    let full = std::fs::read(rc.join("full.f32")).unwrap();
    assert_eq!(full.len(), 16 * 16 * 7 * 4);
    assert_eq!(full, std::fs::read(rc.join("masked.f32")).unwrap());
    ok(&["reconstruct", "--checkpoint", s(&ckpt), "--data", s(&data), "--out-dir", s(&rc)]);
    assert_eq!(json(&rc.join("mask.json"))["masked"].as_array().unwrap().len(), 12);
}

#[test]
fn sparsity_default_profile_has_fifteen_layers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.json");
    ok(&["sparsity", "--out", s(&out)]);
    let r = json(&out);
    assert_eq!(r["layers"].as_array().unwrap().len(), 15);
    assert_eq!(r["total_unique"], 899_456);
    ok(&["--threads", "1", "sparsity", "--profile", "tiny", "--out", s(&out)]);
    assert_eq!(json(&out)["layers"].as_array().unwrap().len(), 2);
}
