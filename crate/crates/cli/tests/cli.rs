use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectral-cil"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "data": {"source": "synthetic", "counts": [10, 10, 10, 10]},
        "scale": 1.0,
        "width_divisor": 16,
        "classes_per_task": 2,
        "strategies": ["finetune"],
        "rounds": 1,
        "train": {"epochs": 1, "batch_size": 16},
        "output_dir": dir.join("out"),
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str(line).expect("stderr is JSON")
}

#[test]
fn gen_data_writes_every_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("data.csv");
    let o = bin(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 40);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 129);
}

#[test]
fn run_then_analyze_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = bin(&[
        "run",
        "--config",
        &cfg,
        "--seed",
        "4",
        "--cb",
        "true",
        "--rho",
        "0.1",
        "--maturity",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("method,task0,task1\nFinetune+CB,"));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], 4);
    assert_eq!(summary["config"]["train"]["cb"]["enabled"], true);
    assert_eq!(summary["records"].as_array().unwrap().len(), 2);

    let ck = dir.path().join("out/checkpoints/finetune_cb_round0.ckpt");
    let kde_dir = dir.path().join("kde");
    let o = bin(&[
        "analyze",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        kde_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let layers = v["layers"].as_array().unwrap();
    assert!(layers.iter().any(|l| l["name"] == "branch0.7.conv.weight"));
    for l in layers {
        assert!((l["kde_integral"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    }
    assert!(kde_dir.join("kde_head.weight.csv").exists());
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"rounds": 0}"#).unwrap();
    let o = bin(&["run", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert_eq!(stderr_json(&o)["error"], "config");

    let o = bin(&["run", "--strategy", "sgd"]);
    assert!(!o.status.success());
    assert_eq!(stderr_json(&o)["error"], "usage");

    let o = bin(&[
        "analyze",
        "--checkpoint",
        dir.path().join("missing.ckpt").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert_eq!(stderr_json(&o)["error"], "io");
}
