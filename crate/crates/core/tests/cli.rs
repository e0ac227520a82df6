//! End-to-end CLI flow: synth model -> banks -> calibrate -> steer ->
//! budget -> check, via the built `mi` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mi(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mi"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn mi")
}

fn write(path: &Path, content: &str) {
    fs::write(path, content).unwrap();
}

const SYNTH_SPEC: &str = r#"{
  "config": {
    "n_layers": 3,
    "d_model": 16,
    "n_q_heads": 4,
    "n_kv_heads": 2,
    "head_dim": 4,
    "vocab_size": 260,
    "rope_theta": 10000.0,
    "norm_eps": 1e-6,
    "qk_norm_enabled": false
  },
  "seed": 11
}"#;

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(&d.join("model.json"), SYNTH_SPEC);
    write(
        &d.join("target.json"),
        r#"{
  "bank_id": "warm",
  "role": "target",
  "source_text": "answer warmly and stay encouraging",
  "templates": ["direct", "hidden-steering-note"],
  "keep_policy": "descriptor-span-only",
  "prior": 0.0
}"#,
    );
    write(
        &d.join("ref.json"),
        r#"{
  "bank_id": "cold",
  "role": "reference",
  "source_text": "answer curtly and dismiss concerns",
  "templates": ["direct"],
  "keep_policy": "descriptor-span-only",
  "prior": 0.0
}"#,
    );
    write(&d.join("prompts.txt"), "how should I prepare?\nwhat now\n");

    // banks over all sites for calibration
    let out = mi(
        &["build-bank", "--model", "model.json", "--spec", "target.json", "--sites", "all", "--out", "target.mib"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = mi(
        &["build-bank", "--model", "model.json", "--spec", "ref.json", "--sites", "all", "--out", "ref.mib"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // calibrate k=1 m=2
    let out = mi(
        &[
            "calibrate", "--model", "model.json", "--target-bank", "target.mib", "--ref-bank", "ref.mib",
            "--prompts", "prompts.txt", "-k", "1", "-m", "2", "--steps", "6", "--out", "artifact.json",
        ],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("artifact.json").exists());

    // rebuild the target bank only at selected sites
    let out = mi(
        &["build-bank", "--model", "model.json", "--spec", "target.json", "--sites", "artifact:artifact.json", "--out", "target-sel.mib"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // plain decode (no banks) is deterministic
    write(
        &d.join("run-plain.json"),
        r#"{
  "version": 1,
  "model": "model.json",
  "prompt": "hello there",
  "steps": 8,
  "banks": []
}"#,
    );
    let a = mi(&["steer", "--config", "run-plain.json"], d);
    let b = mi(&["steer", "--config", "run-plain.json"], d);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout, "plain decode must be deterministic");

    // steered decode with trace emits parseable diagnostics records
    write(
        &d.join("run-steer.json"),
        r#"{
  "version": 1,
  "model": "model.json",
  "prompt": "hello there",
  "steps": 8,
  "banks": ["target-sel.mib"],
  "artifact": "artifact.json",
  "gains": {"lambda_plus": 6.0, "lambda_minus": 0.0, "gamma": 1.0},
  "mode": "mixture"
}"#,
    );
    let out = mi(&["steer", "--config", "run-steer.json", "--trace"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut diag_lines = 0;
    for line in stdout.lines() {
        if line.starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(line).expect("diag record is JSON");
            assert!(v.get("banks").is_some());
            assert!(v.get("layer").is_some());
            diag_lines += 1;
        }
    }
    assert!(diag_lines > 0, "no diagnostics records streamed:\n{stdout}");
    assert!(stdout.contains("tokens:"));

    // budget anchor: equal-content 48-layer / 5-controlled prints 9.6
    write(
        &d.join("budget.json"),
        r#"{
  "version": 1,
  "scenarios": [
    {"name": "anchor", "layers": 48, "ctrl_layers": 5, "prompt_tokens": 256,
     "bank_slots": 256, "kv_heads": 4, "head_dim": 128, "bytes_per_element": 2}
  ]
}"#,
    );
    let out = mi(&["budget", "--config", "budget.json"], d);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("9.6"), "budget output missing 9.6:\n{stdout}");
    assert!(stdout.contains("anchor,"), "missing csv row:\n{stdout}");
    let c = mi(&["budget", "--config", "budget.json"], d);
    assert_eq!(out.stdout, c.stdout, "budget output must be bit-reproducible");
}

#[test]
fn check_subcommand_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mi(&["check", "--seed", "7", "--instances", "40"], dir.path());
    assert!(
        out.status.success(),
        "mi check failed:\n{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("properties passed"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // usage error -> 1
    let out = mi(&["frobnicate"], d);
    assert_eq!(out.status.code(), Some(1));

    // missing file -> 2
    let out = mi(
        &["build-bank", "--model", "missing.json", "--spec", "x.json", "--sites", "all", "--out", "y.mib"],
        d,
    );
    assert_eq!(out.status.code(), Some(2));

    // malformed config -> 2
    write(&d.join("bad.json"), "{not json");
    let out = mi(&["budget", "--config", "bad.json"], d);
    assert_eq!(out.status.code(), Some(2));

    // help -> 0
    let out = mi(&["--help"], d);
    assert_eq!(out.status.code(), Some(0));
}
