//! End-to-end exercises of the command-line surface on a tiny dataset.

use std::path::Path;
use std::process::{Command, Output};

fn rarunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rarunet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rarunet(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(args: &[&str]) -> String {
    let out = rarunet(args);
    assert!(!out.status.success(), "command {args:?} unexpectedly passed");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn pipeline_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let manifest = data.join("manifest.json");
    let report = dir.path().join("report.json");

    ok(&[
        "gen-synth",
        "--n",
        "12",
        "--size",
        "32",
        "--seed",
        "7",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(manifest.is_file());

    let out = ok(&[
        "corrupt",
        "--manifest",
        manifest.to_str().unwrap(),
        "--beta",
        "0.5",
        "--alpha",
        "0.8",
        "--kinds",
        "elastic",
        "--seed",
        "3",
    ]);
    assert!(out.contains("corrupted 4 samples"), "{out}");

    ok(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--epochs",
        "1",
        "--seed",
        "5",
        "--base-channels",
        "2",
        "--adl",
        "--learning-rate",
        "0.001",
        "--out",
        run.to_str().unwrap(),
    ]);
    for artifact in ["checkpoint.bin", "ledger.csv", "summary.json"] {
        assert!(run.join(artifact).is_file(), "missing {artifact}");
    }
    let ledger = std::fs::read_to_string(run.join("ledger.csv")).unwrap();
    assert!(ledger.starts_with("epoch,sample_id,loss,excluded\n"));

    ok(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--split",
        "test",
        "--report",
        report.to_str().unwrap(),
    ]);
    let json = std::fs::read_to_string(&report).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    let obj = parsed.as_object().unwrap();
    assert_eq!(obj.len(), 12, "report must have exactly twelve fields");
    for key in [
        "dice",
        "iou",
        "accuracy",
        "precision",
        "recall",
        "specificity",
        "hd",
        "assd",
        "rvd",
        "dbd_g",
        "dbd_m",
        "sbd",
    ] {
        assert!(obj.contains_key(key), "missing {key}");
    }
}

#[test]
fn oracle_self_reports_perfect_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let report = dir.path().join("report.json");
    ok(&[
        "gen-synth",
        "--n",
        "10",
        "--size",
        "32",
        "--seed",
        "2",
        "--out",
        data.to_str().unwrap(),
    ]);
    ok(&[
        "eval",
        "--oracle-self",
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--split",
        "test",
        "--report",
        report.to_str().unwrap(),
    ]);
    let json = std::fs::read_to_string(&report).unwrap();
    assert!(json.contains("\"dice\":1.0000"), "{json}");
    assert!(json.contains("\"hd\":0.0000"), "{json}");

    // Normal eval requires a checkpoint.
    let err = fails(&[
        "eval",
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(err.contains("--checkpoint"), "{err}");
}

#[test]
fn param_count_toggle_ordering() {
    let base = ["param-count", "--base-channels", "4"];
    let off: u64 = ok(&base).trim().parse().unwrap();
    let on: u64 = ok(&[
        "param-count",
        "--base-channels",
        "4",
        "--residual-encoders",
        "--residual-skips",
        "--attention",
    ])
    .trim()
    .parse()
    .unwrap();
    assert!(on > off, "all-on {on} must exceed all-off {off}");
}

#[test]
fn errors_exit_nonzero_with_one_line_message() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown flag: usage error.
    let out = rarunet(&["gen-synth", "--bogus", "1"]);
    assert!(!out.status.success());

    // Missing manifest: one-line error.
    let err = fails(&[
        "corrupt",
        "--manifest",
        dir.path().join("nope.json").to_str().unwrap(),
        "--beta",
        "0.5",
        "--alpha",
        "0.8",
    ]);
    let first = err.lines().next().unwrap();
    assert!(first.starts_with("error: "), "{err}");

    // Invalid combination: bad beta.
    let data = dir.path().join("data");
    ok(&[
        "gen-synth",
        "--n",
        "10",
        "--size",
        "32",
        "--seed",
        "1",
        "--out",
        data.to_str().unwrap(),
    ]);
    let err = fails(&[
        "corrupt",
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--beta",
        "1.5",
        "--alpha",
        "0.8",
    ]);
    assert!(err.contains("[0, 1]"), "{err}");

    // gen-synth size not a multiple of 16.
    let err = fails(&[
        "gen-synth",
        "--n",
        "10",
        "--size",
        "30",
        "--seed",
        "1",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert!(err.contains("multiple of 16"), "{err}");
}

#[test]
fn config_file_with_unknown_keys_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"arch": {"base_channels": 2}, "typo_key": 1}"#).unwrap();
    let err = fails(&[
        "param-count",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(err.contains("typo_key") || err.contains("unknown field"), "{err}");

    std::fs::write(&cfg, r#"{"arch": {"base_channels": 2, "bogus": true}}"#).unwrap();
    let err = fails(&["param-count", "--config", cfg.to_str().unwrap()]);
    assert!(err.contains("bogus") || err.contains("unknown field"), "{err}");
}

#[test]
fn determinism_across_reruns() {
    let read = |p: &Path| std::fs::read(p).unwrap();
    let run_pipeline = |root: &Path| {
        let data = root.join("data");
        ok(&[
            "gen-synth",
            "--n",
            "10",
            "--size",
            "32",
            "--seed",
            "9",
            "--out",
            data.to_str().unwrap(),
        ]);
        ok(&[
            "corrupt",
            "--manifest",
            data.join("manifest.json").to_str().unwrap(),
            "--beta",
            "0.5",
            "--alpha",
            "0.8",
            "--kinds",
            "erosion,dilation,elastic",
            "--seed",
            "4",
        ]);
        read(&data.join("manifest.json"))
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    assert_eq!(run_pipeline(d1.path()), run_pipeline(d2.path()));
}
