use std::path::Path;
use std::process::{Command, Output};

use stpredict::network::{build_model, read_checkpoint};
use stpredict::network::VariantSpec;

const CONFIG: &str = r#"{
  "data": {"scenario": "S3_highway", "bursts": 200, "delay_taps": 2, "n_antennas": 2, "seed": 4},
  "model": {"base": "ConvLSTM", "channels": [4], "ghu_channels": 4, "kernel": 3},
  "train": {"iters": 3, "batch": 2, "seed": 7, "val_every": 2},
  "meta": {"labeled_fraction": 0.3}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stpredict")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ma = ok(&["gen-data", "--config", &cfg, "--out", s(&a)]);
    let mb = ok(&["gen-data", "--config", &cfg, "--out", s(&b)]);
    assert_eq!(ma["hash"], mb["hash"]);
    let sizes: Vec<usize> = ["train", "val", "test"].iter().map(|k| ma["splits"][k].as_array().unwrap().len()).collect();
    assert_eq!(sizes, vec![7, 1, 2]);
    for f in ["train.csit", "val.csit", "test.csit", "scales.csit", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn training_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONFIG);
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", &cfg, "--out", s(&data)]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let sa = ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&a)]);
    ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&b)]);
    assert_eq!(sa["iters"], 3);
    for f in ["checkpoint.stpc", "history.jsonl", "config.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let history = std::fs::read_to_string(a.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let (ea, eb) = (dir.path().join("ea"), dir.path().join("eb"));
    let ck = a.join("checkpoint.stpc");
    let ra = ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&ea)]);
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&eb)]);
    assert_eq!(ra["per_step"].as_array().unwrap().len(), 10);
    for f in ["metrics.csv", "curves.json", "cdfs.json", "manifest.json"] {
        assert_eq!(std::fs::read(ea.join(f)).unwrap(), std::fs::read(eb.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONFIG);
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", &cfg, "--out", s(&data)]);
    let out = dir.path().join("run");
    let sum = ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&out), "--iters", "0"]);
    assert_eq!(sum["iters"], 0);
    let saved = read_checkpoint(&out.join("checkpoint.stpc")).unwrap();
    let v: VariantSpec = serde_json::from_value(serde_json::json!({"base": "ConvLSTM", "channels": [4], "ghu_channels": 4})).unwrap();
    let fresh = build_model::<f32>(&v, 2, 4, 7).unwrap();
    assert_eq!(saved.params.max_abs_diff(&fresh.params), 0.0);
    assert_eq!(std::fs::read_to_string(out.join("history.jsonl")).unwrap(), "");
}

#[test]
fn meta_train_writes_both_networks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONFIG);
    let other = write_config(dir.path(), "o.json", &CONFIG.replace("S3_highway", "S2_static_rx"));
    let (lab, unl) = (dir.path().join("lab"), dir.path().join("unl"));
    ok(&["gen-data", "--config", &cfg, "--out", s(&lab)]);
    ok(&["gen-data", "--config", &other, "--out", s(&unl)]);
    let out = dir.path().join("meta");
    let sum = ok(&["meta-train", "--config", &cfg, "--labeled", s(&lab), "--unlabeled", s(&unl), "--out", s(&out), "--adaptive"]);
    assert_eq!(sum["iters"], 3);
    assert!(out.join("teacher.stpc").exists() && out.join("student.stpc").exists());
    let resolved: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["meta"]["adaptive"], true);
    for line in std::fs::read_to_string(out.join("history.jsonl")).unwrap().lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["h"].is_number());
    }
}

#[test]
fn config_errors_exit_with_two_and_a_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", &CONFIG.replace("\"seed\": 4}", "\"seed\": 4, \"ratios\": [0, 0, 0]}"));
    let out = run(&["gen-data", "--config", &bad, "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/data/ratios"));

    let typo = write_config(dir.path(), "typo.json", &CONFIG.replace("\"batch\"", "\"bacth\""));
    let out = run(&["params", "--config", &typo]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/train"));

    let out = run(&["params", "--config", s(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONFIG);
    let out = run(&["train", "--config", &cfg, "--data", s(&dir.path().join("nowhere")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONFIG);
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", &cfg, "--out", s(&data)]);
    let run_dir = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&run_dir), "--iters", "1"]);
    let other = write_config(dir.path(), "o.json", &CONFIG.replace("\"ConvLSTM\"", "\"CAConvLSTM\""));
    let ck = run_dir.join("checkpoint.stpc");
    let out = run(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--config", &other]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/model") && err.contains("CAConvLSTM") && err.contains("ConvLSTM"), "{err}");
    let rec = ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--config", &cfg, "--split", "val"]);
    assert_eq!(rec["label"], "ConvLSTM");
}

#[test]
fn ablate_covers_the_seven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &CONFIG.replace("\"iters\": 3", "\"iters\": 1").replace("[4]", "[4, 4]"),
    );
    let out = dir.path().join("abl");
    let rows = ok(&["ablate", "--config", &cfg, "--out", s(&out)]);
    let labels: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(
        labels,
        ["ConvLSTM", "ST-ConvLSTM", "CA-ConvLSTM", "+T.Atten", "+S.T.Atten", "+CC.Atten", "+CC.Atten+GHU"]
    );
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);
}

#[test]
fn params_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONFIG);
    let r = ok(&["params", "--config", &cfg]);
    // input 1x1 (2 -> 4), ConvLSTM gates 3x3 over 8 -> 16, output 1x1 (4 -> 2)
    assert_eq!(r["params"], 12 + (16 * 8 * 9 + 16) + 10);
    assert!(r["flops_per_window"].as_u64().unwrap() > r["flops_per_step"].as_u64().unwrap());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}
