use coda::format::DatasetFile;
use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "splits": {"train": 2, "adapt": 1, "eval": 2},
  "train": {"epochs": 3},
  "adapt": {"max_steps": 10},
  "analysis": {"resolution": 3}
}"#;

fn coda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coda"))
        .args(args)
        .current_dir(dir)
        .env("CODA_LOG", "error")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = coda(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), TINY).unwrap();
    dir
}

fn manifest(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

fn output_hashes(m: &Value) -> Vec<String> {
    m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["sha256"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn default_generation_counts_and_stable_hashes() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--out", "a", "--seed", "5"]);
    ok(dir.path(), &["generate", "--out", "b", "--seed", "5"]);
    let a = manifest(&dir.path().join("a"), "generate.manifest.json");
    let b = manifest(&dir.path().join("b"), "generate.manifest.json");
    assert_eq!(output_hashes(&a), output_hashes(&b));
    assert_eq!(a["content_hash"], b["content_hash"]);
    let train = DatasetFile::read(&dir.path().join("a/lv_train.coda")).unwrap();
    assert_eq!(train.datasets.len(), 9);
    assert!(train.datasets.iter().all(|d| d.len() == 4));
    let adapt = DatasetFile::read(&dir.path().join("a/lv_adapt.coda")).unwrap();
    assert_eq!(adapt.datasets.len(), 4);
    let eval = DatasetFile::read(&dir.path().join("a/lv_eval.coda")).unwrap();
    assert!(eval.datasets.iter().all(|d| d.len() == 32));
    ok(dir.path(), &["generate", "--out", "c", "--seed", "6"]);
    let c = manifest(&dir.path().join("c"), "generate.manifest.json");
    assert_ne!(a["content_hash"], c["content_hash"]);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.json"), r#"{"system": "pendulum"}"#).unwrap();
    let o = coda(p, &["generate", "--config", "bad.json"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("pendulum"));
    std::fs::write(p.join("typo.json"), r#"{"train": {"epoch": 3}}"#).unwrap();
    assert_eq!(code(&coda(p, &["generate", "--config", "typo.json"])), 2);
    assert_eq!(code(&coda(p, &["generate", "--variant", "l3"])), 2);
    assert_eq!(code(&coda(p, &["frobnicate"])), 2);
    assert_eq!(code(&coda(p, &["train", "--out", "missing"])), 2);
}

#[test]
fn pipeline_and_metrics_columns() {
    let dir = tiny_dir();
    let p = dir.path();
    for cmd in ["generate", "train", "adapt"] {
        ok(p, &[cmd, "--config", "c.json", "--out", "run"]);
    }
    ok(p, &["eval", "--config", "c.json", "--out", "run", "--metrics", "mse,mape"]);
    let csv = std::fs::read_to_string(p.join("run/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "env_id,domain,mse,mape");
    assert_eq!(csv.lines().count(), 1 + 13);
    let m = manifest(&p.join("run"), "metrics.json");
    assert!(m["in_domain"]["mse"].is_f64() && m["adaptation"]["mape"].is_f64());

    ok(p, &["eval", "--config", "c.json", "--out", "run", "--metrics", "mse"]);
    let csv = std::fs::read_to_string(p.join("run/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "env_id,domain,mse");
    assert_eq!(code(&coda(p, &["eval", "--config", "c.json", "--out", "run", "--metrics", "rmse"])), 2);

    for cmd in ["estimate", "landscape", "svd"] {
        ok(p, &[cmd, "--config", "c.json", "--out", "run"]);
    }
    let est = manifest(&p.join("run"), "estimation.json");
    assert_eq!(est["estimates"].as_array().unwrap().len(), 13);
    let svd = manifest(&p.join("run"), "svd.json");
    let s: Vec<f64> = svd["singular_values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(s.len(), 8);
    assert!(s.windows(2).all(|w| w[0] >= w[1]));
    let land = std::fs::read_to_string(p.join("run/landscape.csv")).unwrap();
    assert_eq!(land.lines().count(), 1 + 9 * 9);

    ok(p, &["train", "--erm", "--config", "c.json", "--out", "run"]);
    let o = coda(p, &["adapt", "--config", "c.json", "--out", "run", "--checkpoint", "run/erm.coda"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn manifest_replay_reproduces_artifacts() {
    let dir = tiny_dir();
    let p = dir.path();
    ok(p, &["generate", "--config", "c.json", "--out", "run", "--seed", "11"]);
    ok(p, &["train", "--config", "c.json", "--out", "run", "--seed", "11"]);
    let first = manifest(&p.join("run"), "train.manifest.json");
    ok(p, &["train", "--config", "run/config.json"]);
    let again = manifest(&p.join("run"), "train.manifest.json");
    assert_eq!(output_hashes(&first), output_hashes(&again));
    assert_eq!(first["config_hash"], again["config_hash"]);
    assert_eq!(again["seed"], 11);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tiny_dir();
    let p = dir.path();
    for (out, threads) in [("one", "1"), ("two", "2")] {
        ok(p, &["generate", "--config", "c.json", "--out", out, "--threads", threads]);
        ok(p, &["train", "--config", "c.json", "--out", out, "--threads", threads]);
    }
    for m in ["generate.manifest.json", "train.manifest.json"] {
        assert_eq!(
            output_hashes(&manifest(&p.join("one"), m)),
            output_hashes(&manifest(&p.join("two"), m))
        );
    }
}

#[test]
fn svd_needs_two_environments() {
    let dir = tiny_dir();
    let p = dir.path();
    ok(p, &["generate", "--config", "c.json", "--out", "run"]);
    let mut f = DatasetFile::read(&p.join("run/lv_train.coda")).unwrap();
    f.datasets.truncate(1);
    f.write(&p.join("one.coda")).unwrap();
    let o = coda(p, &["svd", "--config", "c.json", "--out", "run", "--data", "one.coda"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains(">= 2 environments required"));
}

#[test]
fn format_and_numerical_failures() {
    let dir = tiny_dir();
    let p = dir.path();
    ok(p, &["generate", "--config", "c.json", "--out", "run"]);
    let mut bytes = std::fs::read(p.join("run/lv_train.coda")).unwrap();
    bytes[4] = 9;
    std::fs::write(p.join("v9.coda"), &bytes).unwrap();
    let o = coda(p, &["train", "--config", "c.json", "--out", "run", "--data", "v9.coda"]);
    assert_eq!(code(&o), 3);
    std::fs::write(p.join("junk.coda"), b"not a container").unwrap();
    assert_eq!(code(&coda(p, &["train", "--config", "c.json", "--out", "run", "--data", "junk.coda"])), 3);

    std::fs::write(p.join("hot.json"), r#"{"splits": {"train": 2, "adapt": 1, "eval": 2}, "train": {"epochs": 50, "learning_rate": 1e3}}"#).unwrap();
    let o = coda(p, &["train", "--config", "hot.json", "--out", "run"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}
