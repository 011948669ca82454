use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn m2m(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2m"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("M2M_DEVICE")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_config(root: &Path) -> PathBuf {
    let text = format!(
        r#"
seed = 3
output_dir = "{out}"

[data]
kind = "poisson"
path = "{data}"

[poisson]
grid = 16
n_samples = 6
train_split = 4
seed = 5

[model]
scale = 2

[[model.experts]]
modes = 2
hidden_channels = 4
num_layers = 1

[[model.experts]]
modes = 4
hidden_channels = 4
num_layers = 1

[model.router]
embed_dim = 8
num_heads = 2
num_layers = 1
pool_size = 4

[train]
epochs = 2
batch_size = 2
k = 1

[bench]
fno_modes = [2, 4]
warmups = 0
repeats = 2
variants = [
  {{ name = "top1", strategy = "topk", k = 1 }},
  {{ name = "dense", strategy = "dense", k = 2 }},
]
"#,
        out = root.join("run").display(),
        data = root.join("data").display()
    );
    let path = root.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn generated(root: &Path) -> PathBuf {
    let cfg = tiny_config(root);
    let out = m2m(&["generate", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    cfg
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn default_config_is_accepted_back() {
    let dir = TempDir::new().unwrap();
    let out = m2m(&["default-config"]);
    assert!(out.status.success());
    let path = dir.path().join("default.toml");
    std::fs::write(&path, &out.stdout).unwrap();
    let data = dir.path().join("d");
    let out = m2m(&[
        "generate",
        "--config",
        path.to_str().unwrap(),
        "--set",
        &format!("data.path=\"{}\"", data.display()),
        "--set",
        "poisson.grid=8",
        "--set",
        "poisson.n_samples=3",
        "--set",
        "poisson.train_split=2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(data.join("train/arrays.bin").exists());
}

#[test]
fn generation_is_byte_identical_for_equal_seeds() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    generated(a.path());
    generated(b.path());
    for split in ["train", "test"] {
        let x = std::fs::read(a.path().join("data").join(split).join("arrays.bin")).unwrap();
        let y = std::fs::read(b.path().join("data").join(split).join("arrays.bin")).unwrap();
        assert_eq!(x, y);
    }
    let manifest = read_json(&a.path().join("data/run_manifest.json"));
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["poisson"]["seed"], 5);
    assert!(manifest["git_describe"].is_string());
}

#[test]
fn unknown_keys_and_bad_overrides_exit_with_config_code() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let out = m2m(&["train", "--config", cfg.to_str().unwrap(), "--set", "train.epoch=3"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("epoch"));
    let out = m2m(&["train", "--config", cfg.to_str().unwrap(), "--set", "train.k=9"]);
    assert_eq!(out.status.code(), Some(2));
    let out = m2m(&["train", "--config", cfg.to_str().unwrap(), "--set", "novalue"]);
    assert_eq!(out.status.code(), Some(2));
    let out = m2m(&["train", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unsupported_device_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_m2m"))
        .arg("default-config")
        .env("M2M_DEVICE", "tpu")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_with_data_code() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let out = m2m(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn unwritable_output_is_reported() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, b"file").unwrap();
    let target = format!("data.path=\"{}\"", blocker.join("sub").display());
    let out = m2m(&["generate", "--config", cfg.to_str().unwrap(), "--set", &target]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("error"));
}

#[test]
fn train_then_eval_is_consistent_with_the_log() {
    let dir = TempDir::new().unwrap();
    let cfg = generated(dir.path());
    let out = m2m(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("run");
    for f in [
        "checkpoint.bin",
        "checkpoint.json",
        "run_log.csv",
        "run_log.json",
        "router_snapshots.json",
        "controller_trace.csv",
        "run_manifest.json",
        "config.toml",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(run.join("run_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let log = read_json(&run.join("run_log.json"));
    let final_train = log["epochs"][1]["train_rel_l2"].as_f64().unwrap();

    let out = m2m(&[
        "eval",
        "--checkpoint",
        run.to_str().unwrap(),
        "--data",
        dir.path().join("data/train").to_str().unwrap(),
        "--repeats",
        "1",
        "--warmups",
        "0",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let record: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rel = record["rel_l2"].as_f64().unwrap();
    assert!(rel <= final_train + 1e-6, "eval {rel} vs logged {final_train}");
    assert!(record["forward_ms"].as_f64().unwrap() > 0.0);
}

#[test]
fn manifest_config_echo_reruns_identically() {
    let dir = TempDir::new().unwrap();
    let cfg = generated(dir.path());
    let out = m2m(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("run");
    let first = std::fs::read_to_string(run.join("run_log.csv")).unwrap();
    let echo = dir.path().join("echo.toml");
    std::fs::copy(run.join("config.toml"), &echo).unwrap();
    let rerun = dir.path().join("rerun");
    let target = format!("output_dir=\"{}\"", rerun.display());
    let out = m2m(&["train", "--config", echo.to_str().unwrap(), "--set", &target]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(rerun.join("run_log.csv")).unwrap(), first);
}

#[test]
fn divergence_exits_with_code_four_and_keeps_logs() {
    let dir = TempDir::new().unwrap();
    let cfg = generated(dir.path());
    let out = m2m(&["train", "--config", cfg.to_str().unwrap(), "--set", "train.learning_rate=1e300"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    let run = dir.path().join("run");
    assert!(run.join("run_log.csv").exists());
    assert_eq!(read_json(&run.join("run_manifest.json"))["status"], "failed");
}

#[test]
fn scale_one_single_expert_is_a_plain_baseline() {
    let dir = TempDir::new().unwrap();
    let cfg = generated(dir.path());
    let out = m2m(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "model.scale=1",
        "--set",
        "model.experts=[{modes = 4, hidden_channels = 4, num_layers = 1}]",
        "--set",
        "train.epochs=1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = read_json(&dir.path().join("run/run_log.json"));
    assert_eq!(log["epochs"][0]["router_probs"], serde_json::json!([[1.0]]));
}

#[test]
fn bench_rows_match_the_sweep_and_plots_render() {
    let dir = TempDir::new().unwrap();
    let cfg = generated(dir.path());
    let out = m2m(&["bench", "--config", cfg.to_str().unwrap(), "--set", "train.epochs=1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("run");
    let report = read_json(&run.join("pareto_report.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let names: Vec<&str> = rows.iter().map(|r| r["model_name"].as_str().unwrap()).collect();
    assert_eq!(names, ["fno_2", "fno_4", "top1", "dense"]);
    assert!(rows.iter().any(|r| r["efficient"] == true));
    assert!(report["protocol"].as_str().unwrap().contains("median"));
    let csv = std::fs::read_to_string(run.join("pareto_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let plots = dir.path().join("plots");
    let out = m2m(&[
        "plot",
        "--report",
        run.join("pareto_report.json").to_str().unwrap(),
        "--run-log",
        run.join("models/top1/run_log.json").to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["pareto.png", "router_weights.png", "router_argmax.png"] {
        assert!(plots.join(f).exists(), "{f} missing");
    }
}

#[test]
fn bench_with_one_model_flags_it_efficient() {
    let dir = TempDir::new().unwrap();
    let cfg = generated(dir.path());
    let out = m2m(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.epochs=1",
        "--set",
        "bench.fno_modes=[4]",
        "--set",
        "bench.variants=[]",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = read_json(&dir.path().join("run/pareto_report.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 1);
    assert_eq!(report["rows"][0]["efficient"], true);
}
