use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bnca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnca")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_blobs_csv(path: &Path, offset: f64) {
    let mut text = String::from("x,y,label\n");
    for i in 0..30 {
        let c = i % 3;
        let t = i as f64 * 0.37 + offset;
        text.push_str(&format!(
            "{},{},{}\n",
            c as f64 * 3.0 + t.sin() * 0.4,
            c as f64 * -2.0 + t.cos() * 0.4,
            c
        ));
    }
    fs::write(path, text).unwrap();
}

const FAST: &[&str] = &[
    "--repeats",
    "2",
    "--mcmc-samples",
    "20",
    "--nca-max-iters",
    "5",
    "--test-per-class",
    "5",
];

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test, model) = (
        dir.path().join("train.csv"),
        dir.path().join("test.csv"),
        dir.path().join("m.json"),
    );
    write_blobs_csv(&train, 0.0);
    write_blobs_csv(&test, 0.5);
    let out = bnca(&[
        "train",
        "--data",
        train.to_str().unwrap(),
        "--has-header",
        "--model",
        model.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let saved: Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(saved["converged"], Value::Bool(true));
    assert_eq!(saved["train"]["labels"].as_array().unwrap().len(), 30);

    let out = bnca(&[
        "evaluate",
        "--model",
        model.to_str().unwrap(),
        "--data",
        test.to_str().unwrap(),
        "--has-header",
        "--mcmc-samples",
        "50",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(eval["accuracy"].as_f64().unwrap(), 1.0);
    assert_eq!(eval["predictions"].as_array().unwrap().len(), 30);
}

#[test]
fn sweep_noise_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    let mut args = vec![
        "sweep-noise",
        "--noise-levels",
        "0,0.3",
        "--per-class-sizes",
        "6,9",
        "--out",
        json.to_str().unwrap(),
    ];
    args.extend_from_slice(FAST);
    let out = bnca(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let bundle: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    // two noise levels, one training size, three methods
    assert_eq!(bundle["rows"].as_array().unwrap().len(), 6);
    assert_eq!(bundle["config"]["per_class_sizes"], serde_json::json!([6]));

    let csv = dir.path().join("r.csv");
    let out = bnca(&[
        "report",
        "--input",
        json.to_str().unwrap(),
        "--format",
        "csv",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let table = fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().next().unwrap(), "condition,pca,nca,bnca");
    assert_eq!(table.lines().count(), 3);
    assert!(dir.path().join("r.trace.bnca.1.csv").exists());
}

#[test]
fn sweep_size_prints_table() {
    let mut args = vec![
        "sweep-size",
        "--per-class-sizes",
        "4,6",
        "--methods",
        "pca",
        "--format",
        "csv",
    ];
    args.extend_from_slice(FAST);
    let out = bnca(&args);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("condition,pca\n"));
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"repeats": 3, "methods": ["pca"]}"#).unwrap();
    let mut args = vec!["sweep-size", "--config", cfg.to_str().unwrap(), "--methods", "nca"];
    args.extend_from_slice(FAST);
    let out = bnca(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let bundle: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = bundle["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["method"], "pca");
    assert_eq!(rows[0]["accuracy"]["per_seed_scores"].as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&bnca(&["sweep-noise", "--repeats", "0"])), 1);
    assert_eq!(code(&bnca(&["sweep-noise", "--tau", "1.5"])), 1);
    assert_eq!(code(&bnca(&["no-such-verb"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(code(&bnca(&["sweep-noise", "--config", bad_cfg.to_str().unwrap()])), 1);

    let model = dir.path().join("m.json");
    assert_eq!(
        code(&bnca(&[
            "train",
            "--data",
            "/definitely/missing.csv",
            "--model",
            model.to_str().unwrap()
        ])),
        2
    );
    let ragged = dir.path().join("ragged.csv");
    fs::write(&ragged, "1,2,0\n3,1\n").unwrap();
    assert_eq!(
        code(&bnca(&[
            "train",
            "--data",
            ragged.to_str().unwrap(),
            "--model",
            model.to_str().unwrap()
        ])),
        2
    );
    assert_eq!(code(&bnca(&["--help"])), 0);
}
