//! The binary's subcommands, artifacts and exit codes on a small model.

use std::path::Path;
use std::process::{Command, Output};

use zadapt::adapter::trainable_parameter_count;
use zadapt::cli::RunConfig;

fn zadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zadapt")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Six layers of width 16; no pre-training, a handful of steps.
const SMALL: &str = r#"{
  "model": {"dim": 16, "n_heads": 2, "n_layers": 6, "adapted_layers": 4, "prompt_len": 3, "ffn_hidden": 32},
  "train": {"epochs": 1, "warmup_epochs": 0, "max_steps": 4, "batch_size": 4, "eval_every": 2, "eval_samples": 4},
  "task": {"kind": "copy", "samples": 40},
  "pretrain": {"steps": 0}
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn trained(dir: &Path) -> (String, String) {
    let cfg = write_config(dir, "small.json", SMALL);
    let out = dir.join("run");
    let o = zadapt(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (cfg, out.to_string_lossy().into_owned())
}

#[test]
fn train_writes_artifacts_and_reports_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path());
    for f in ["full.zadp", "adapter.zadp", "metrics.csv", "config.json"] {
        assert!(Path::new(&out).join(f).exists(), "{f}");
    }
    let run = RunConfig::load(&cfg).unwrap();
    let o = zadapt(&["train", "--config", &cfg, "--out", &out]);
    let text = stdout(&o);
    let count: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("trainable_params "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(count, trainable_parameter_count(&run.model_config().unwrap(), false));
    assert!(text.contains("wall_time_s"));
    let metrics = std::fs::read_to_string(Path::new(&out).join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,epoch,lr,train_loss,val_loss,val_acc\n"));
    assert_eq!(metrics.lines().count(), 5);
    // the echoed config reloads to the same digest
    let echoed = RunConfig::load(Path::new(&out).join("config.json")).unwrap();
    assert_eq!(echoed.digest(), run.digest());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", "{\n  \"train\": {\"epochs\": 1,}\n}");
    let o = zadapt(&["train", "--config", &bad, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");
    let o = zadapt(&["ablate", "--spec", "table9", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(zadapt(&["train"]).status.code(), Some(2));
}

#[test]
fn numeric_abort_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "huge.json",
        &SMALL.replace("\"batch_size\": 4", "\"batch_size\": 4, \"peak_lr\": 1e300"),
    );
    let o = zadapt(&["train", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_and_its_failures() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path());
    let full = format!("{out}/full.zadp");
    let adapter = format!("{out}/adapter.zadp");
    let o = zadapt(&["generate", "--config", &cfg, "--ckpt", &full, "--instruction", "copy", "--input", "abc", "--max-new-tokens", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let greedy = ["--method", "greedy", "--max-new-tokens", "5"];
    let a = zadapt(&[&["generate", "--config", &cfg, "--ckpt", &full, "--instruction", "copy", "--input", "abc"][..], &greedy].concat());
    assert!(a.status.success());
    // adapter-only file over the same base decodes identically
    let b = zadapt(&[&["generate", "--config", &cfg, "--ckpt", &adapter, "--base", &full, "--instruction", "copy", "--input", "abc"][..], &greedy].concat());
    assert_eq!(stdout(&a), stdout(&b));
    let o = zadapt(&["generate", "--config", &cfg, "--ckpt", &format!("{out}/missing.zadp"), "--instruction", "copy"]);
    assert_eq!(o.status.code(), Some(4));
    let other = write_config(dir.path(), "other.json", &SMALL.replace("\"adapted_layers\": 4", "\"adapted_layers\": 3"));
    let o = zadapt(&["generate", "--config", &other, "--ckpt", &full, "--instruction", "copy"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn inspect_reports_one_row_per_layer_and_head() {
    let dir = tempfile::tempdir().unwrap();
    let fresh = write_config(dir.path(), "fresh.json", &SMALL.replace("\"epochs\": 1", "\"epochs\": 0"));
    let out = dir.path().join("fresh");
    assert!(zadapt(&["train", "--config", &fresh, "--out", out.to_str().unwrap()]).status.success());
    let o = zadapt(&["inspect", "--config", &fresh, "--ckpt", out.join("adapter.zadp").to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 * 2);
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("0")));

    let (cfg, out) = trained(dir.path());
    let o = zadapt(&["inspect", "--config", &cfg, "--ckpt", &format!("{out}/adapter.zadp")]);
    let max_gate = stdout(&o)
        .lines()
        .skip(1)
        .map(|r| r.split(',').nth(3).unwrap().parse::<f64>().unwrap())
        .fold(0.0, f64::max);
    assert!(max_gate > 0.0);
    let o = zadapt(&["inspect", "--ckpt", dir.path().join("nothing.zadp").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn gradcheck_scopes_and_negative_control() {
    let o = zadapt(&["gradcheck", "--scope", "primitives"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let o = zadapt(&["gradcheck", "--scope", "full"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let o = zadapt(&["gradcheck", "--scope", "adapter", "--corrupt-backward"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn ablate_writes_curves_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let out = dir.path().join("abl");
    let o = zadapt(&["ablate", "--config", &cfg, "--spec", "init_mode_compare", "--seeds", "1", "--steps", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut files: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    files.sort();
    assert_eq!(files, ["seed0_rand_init.csv", "seed0_zero_init.csv", "summary.csv"]);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("zero_init_wins,") && l.ends_with(",of,1")), "{summary}");

    let out = dir.path().join("sweep");
    let o = zadapt(&["ablate", "--config", &cfg, "--spec", "layers_sweep", "--steps", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let layers: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(layers, ["1", "3", "4"]);
}
