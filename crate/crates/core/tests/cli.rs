//! The command-line binary: exit codes, outputs and reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smpc_fedsim::dealer::{encode_randomness, Dealer, Material};
use smpc_fedsim::ring::FixedPointConfig;

const SMALL: &str = r#"{
  "data": {"blobs": {"side": 8}, "train_samples": 48, "validation_samples": 20, "test_samples": 8},
  "model": {"filters": 2, "hidden": 8},
  "train": {"hospitals": 2, "rounds": 2},
  "infer": {"batch_sizes": [2, 4]},
  "selftest": {"beaver_cases": 200, "share_cases": 200},
  "randomness": {"inferences": 1}
}"#;

fn bin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smpc-fedsim")).args(args).current_dir(dir).output().expect("binary runs")
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, config).unwrap();
    (dir, cfg)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn print_config_applies_overrides() {
    let (dir, cfg) = setup(SMALL);
    let o = bin(&["--config", cfg.to_str().unwrap(), "--seed", "99", "--link", "4g", "print-config"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 99);
    assert_eq!(v["link"], "4g");
    assert_eq!(v["model"]["hidden"], 8);
}

#[test]
fn config_errors_exit_2() {
    let (dir, cfg) = setup("{\n  \"train\": {\"epochs\": 3}\n}");
    let o = bin(&["--config", cfg.to_str().unwrap(), "train"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = bin(&["--config", "nope.json", "train"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = bin(&["--link", "5g", "train"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let (dir, cfg) = setup(SMALL);
    let o = bin(&["--config", cfg.to_str().unwrap(), "infer"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model_party0.smpcmodl"), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_3() {
    let (dir, cfg) = setup(&SMALL.replace("\"rounds\": 2", "\"rounds\": 2, \"learning_rate\": 1e200"));
    let o = bin(&["--config", cfg.to_str().unwrap(), "train"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("round 1"), "{}", stderr(&o));
}

#[test]
fn selftest_rejects_corrupted_triple() {
    let (dir, cfg) = setup(SMALL);
    let ring = FixedPointConfig::default();
    let len = 16;
    let t = Dealer::new(ring, 1).gen_triple(len);
    let mut bytes = encode_randomness(ring, &[Material::Triple(t)]);
    let good = dir.path().join("good.smpcfrnd");
    fs::write(&good, &bytes).unwrap();
    let o = bin(&["--config", cfg.to_str().unwrap(), "selftest", "--randomness", good.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    // Header 20 bytes, record header 13, then a0 and b0 before c0.
    bytes[20 + 13 + 2 * len * 8 + 3] ^= 0x40;
    let bad = dir.path().join("bad.smpcfrnd");
    fs::write(&bad, &bytes).unwrap();
    let o = bin(&["--config", cfg.to_str().unwrap(), "selftest", "--randomness", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(4));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("FAIL beaver-oracle") && out.contains("c != a*b"), "{out}");
    let csv = fs::read_to_string(dir.path().join("smpc-out/selftest.csv")).unwrap();
    assert!(csv.contains("beaver-oracle,0,1,fail"), "{csv}");
}

fn pipeline(dir: &Path, cfg: &Path, out: &str) -> Vec<(String, Vec<u8>)> {
    let c = cfg.to_str().unwrap();
    for cmd in ["train", "infer", "selftest", "gen-randomness"] {
        let o = bin(&["--config", c, "--output-dir", out, cmd], dir);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
    }
    let mut files: Vec<_> = fs::read_dir(dir.join(out))
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn pipeline_outputs_are_reproducible() {
    let (dir, cfg) = setup(SMALL);
    let a = pipeline(dir.path(), &cfg, "a");
    let b = pipeline(dir.path(), &cfg, "b");
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    for want in [
        "infer.csv",
        "infer.dat",
        "infer_transcript.jsonl",
        "metrics.csv",
        "metrics.dat",
        "model_party0.smpcmodl",
        "model_party1.smpcmodl",
        "model_plain.smpcmodl",
        "predictions.csv",
        "randomness.smpcfrnd",
        "selftest.csv",
        "train_summary.json",
        "train_transcript.jsonl",
    ] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    for ((na, da), (nb, db)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        if na == "train_summary.json" {
            // Holds the output directory; everything else must match.
            continue;
        }
        assert!(da == db, "{na} differs between reruns");
    }
    let metrics = String::from_utf8(a.iter().find(|(n, _)| n == "metrics.csv").unwrap().1.clone()).unwrap();
    assert!(metrics.starts_with("round,hospital_id,split,accuracy,loss,bytes_sent,wall_ms\n"));
    assert_eq!(metrics.lines().count(), 1 + 2 * 4);

    let c = cfg.to_str().unwrap();
    let o = bin(&["--config", c, "--output-dir", "a", "--seed", "8", "infer"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let reseeded = fs::read(dir.path().join("a/infer.csv")).unwrap();
    let first = &a.iter().find(|(n, _)| n == "infer.csv").unwrap().1;
    assert!(&reseeded != first, "a different seed should change the transcript hashes");
}
