use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lace_core::world::WorldConfig;
use tempfile::TempDir;

const SMALL_MODEL: &str = "batch_length = 256\nsegments_per_batch = 2\n\n[model]\nkeys = 8\nhidden = [8]\n";

fn lace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lace"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn jsonl_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    v.sort();
    v
}

fn manifests(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains("manifest"))
        .count()
}

fn generate(dir: &Path, laps: usize, seed: u64) {
    ok(lace(&["generate", "--out", p(dir), "--laps", &laps.to_string(), "--seed", &seed.to_string()]));
}

/// Small dataset plus a small-model training config.
fn small_setup() -> (TempDir, PathBuf, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 4, 7);
    let cfg = tmp.path().join("train.toml");
    std::fs::write(&cfg, SMALL_MODEL).unwrap();
    (tmp, data, cfg)
}

fn train(data: &Path, cfg: &Path, mode: &str, epochs: usize, out: &Path) -> Output {
    lace(&[
        "train",
        "--data",
        p(data),
        "--mode",
        mode,
        "--config",
        p(cfg),
        "--epochs",
        &epochs.to_string(),
        "--out",
        p(out),
    ])
}

#[test]
fn generate_writes_one_file_per_lap_and_a_manifest() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path(), 10, 3);
    let train = jsonl_files(&tmp.path().join("train"));
    let eval = jsonl_files(&tmp.path().join("eval"));
    assert_eq!(train.len() + eval.len(), 10);
    assert_eq!(eval.len(), 2);
    assert_eq!(manifests(tmp.path()), 1);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 11);
}

#[test]
fn generate_is_reproducible() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    generate(a.path(), 3, 11);
    generate(b.path(), 3, 11);
    for split in ["train", "eval"] {
        let fa = jsonl_files(&a.path().join(split));
        let fb = jsonl_files(&b.path().join(split));
        assert_eq!(fa.len(), fb.len());
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.file_name(), y.file_name());
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }
    let ma: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    let mb: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["config_hash"], mb["config_hash"]);

    // A rerun into the same directory with fewer laps leaves no stale laps.
    generate(a.path(), 2, 11);
    let n = jsonl_files(&a.path().join("train")).len() + jsonl_files(&a.path().join("eval")).len();
    assert_eq!(n, 2);
}

#[test]
fn overlapping_bridges_are_rejected_by_name() {
    let tmp = TempDir::new().unwrap();
    let mut world = WorldConfig::default();
    world.bridges[1].center_s = world.bridges[0].center_s + 5.0;
    let cfg = tmp.path().join("world.toml");
    std::fs::write(&cfg, toml::to_string(&world).unwrap()).unwrap();
    let out = lace(&["generate", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bridges 0 and 1 overlap"), "{}", stderr(&out));

    std::fs::write(&cfg, "version = 1\nunknown_key = 3\n").unwrap();
    let out = lace(&["generate", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown_key"), "{}", stderr(&out));
}

#[test]
fn partial_world_config_falls_back_to_defaults() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("partial.toml");
    std::fs::write(&cfg, "version = 1\nseed = 5\n").unwrap();
    let out = tmp.path().join("o");
    ok(lace(&["generate", "--config", p(&cfg), "--out", p(&out), "--laps", "1"]));
    let written: WorldConfig =
        toml::from_str(&std::fs::read_to_string(out.join("world.toml")).unwrap()).unwrap();
    let mut expected = WorldConfig::default();
    expected.seed = 5;
    assert_eq!(written.bridges.len(), expected.bridges.len());
    assert_eq!(written.track.length, expected.track.length);
    assert_eq!(written.seed, 5);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(lace(&[]).status.code(), Some(1));
    assert_eq!(lace(&["train", "--mode", "banana", "--data", "x", "--out", "y"]).status.code(), Some(1));
    assert_eq!(lace(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_dataset_is_named() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = lace(&["train", "--data", p(&missing), "--mode", "lace", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains(p(&missing)), "{}", stderr(&out));
}

#[test]
fn zero_epochs_writes_only_the_initial_loss() {
    let (tmp, data, cfg) = small_setup();
    let out = tmp.path().join("run");
    ok(train(&data, &cfg, "lace", 0, &out));
    let csv = std::fs::read_to_string(out.join("lace_loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,split,nll,smooth,total");
    assert!(lines[1..].iter().all(|l| l.starts_with("0,")));
    assert!(!out.join("lace_checkpoint.json").exists());
    assert_eq!(manifests(&out), 1);
}

#[test]
fn diverging_training_exits_with_two() {
    let (tmp, data, _) = small_setup();
    let cfg = tmp.path().join("wild.toml");
    std::fs::write(&cfg, format!("{SMALL_MODEL}\n[optimizer]\nlearning_rate = 1e300\n")).unwrap();
    let out = train(&data, &cfg, "oneshot", 3, &tmp.path().join("run"));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
}

#[test]
fn train_eval_and_analyses_end_to_end() {
    let (tmp, data, cfg) = small_setup();
    let runs = tmp.path().join("runs");
    let (lace_dir, mlp_dir) = (runs.join("lace"), runs.join("oneshot"));
    ok(train(&data, &cfg, "lace", 3, &lace_dir));
    ok(train(&data, &cfg, "oneshot", 3, &mlp_dir));
    let (a, b) = (
        std::fs::read_to_string(lace_dir.join("lace_loss.csv")).unwrap(),
        std::fs::read_to_string(mlp_dir.join("oneshot_loss.csv")).unwrap(),
    );
    // Same layout for overlay plots: header plus train and eval rows per epoch.
    assert_eq!(a.lines().count(), b.lines().count());
    assert_eq!(a.lines().count(), 1 + 2 * 4);

    // Same seed, same bytes.
    let again = runs.join("again");
    ok(train(&data, &cfg, "lace", 3, &again));
    assert_eq!(a, std::fs::read_to_string(again.join("lace_loss.csv")).unwrap());
    let ckpt = lace_dir.join("lace_checkpoint.json");
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(again.join("lace_checkpoint.json")).unwrap());

    let eval_dir = tmp.path().join("eval");
    let mlp_ckpt = mlp_dir.join("oneshot_checkpoint.json");
    ok(lace(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--checkpoint", p(&mlp_ckpt), "--out", p(&eval_dir)]));
    let csv = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    let models: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(models, ["lace", "oneshot", "bubble", "constant", "oracle"]);
    assert_eq!(manifests(&eval_dir), 1);

    let conv = tmp.path().join("conv");
    ok(lace(&["converge", "--checkpoint", p(&ckpt), "--data", p(&data), "--inits", "4", "--out", p(&conv)]));
    let text = std::fs::read_to_string(conv.join("convergence.csv")).unwrap();
    assert!(text.starts_with("step,trace_0,trace_1,trace_2,trace_3,gap_0_1"));
    let last: Vec<f64> = text.lines().last().unwrap().split(',').skip(5).map(|v| v.parse().unwrap()).collect();
    assert_eq!(last.len(), 6);
    assert!(last.iter().all(|g| *g < 1e-8), "{last:?}");
    let out = lace(&["converge", "--checkpoint", p(&ckpt), "--data", p(&data), "--inits", "1", "--out", p(&conv)]);
    assert_eq!(out.status.code(), Some(1));

    let sweep = tmp.path().join("sweep");
    let out = ok(lace(&["lambda-sweep", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&sweep)]));
    let rows = std::fs::read_to_string(sweep.join("lambda_sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 6);
    assert_eq!(String::from_utf8_lossy(&out.stdout).matches("OUTSIDE").count(), 1);
    let out = lace(&["lambda-sweep", "--checkpoint", p(&ckpt), "--data", p(&data), "--lambdas=-0.2,0.1", "--out", p(&sweep)]);
    assert_eq!(out.status.code(), Some(1));
    let out = lace(&["lambda-sweep", "--checkpoint", p(&mlp_ckpt), "--data", p(&data), "--out", p(&sweep)]);
    assert_eq!(out.status.code(), Some(1));

    let ekf = tmp.path().join("ekf");
    for model in [p(&ckpt), "constant:0.04", "oracle", "bubble"] {
        ok(lace(&["ekf", "--data", p(&data), "--model", model, "--accel-psd", "100", "--out", p(&ekf)]));
        let summary = std::fs::read_to_string(ekf.join("ekf_summary.csv")).unwrap();
        assert!(summary.starts_with("session,rmse,rmse_zone,zone_steps,max_jump,max_nis,diverged"));
        assert_eq!(summary.lines().count(), 1 + jsonl_files(&data.join("eval")).len());
    }
    assert_eq!(manifests(&ekf), 1);

    // The inputs are untouched by all of the above.
    let data_again = tmp.path().join("data_again");
    generate(&data_again, 4, 7);
    for split in ["train", "eval"] {
        for (x, y) in jsonl_files(&data.join(split)).iter().zip(jsonl_files(&data_again.join(split))) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let (tmp, data, cfg) = small_setup();
    let run = tmp.path().join("run");
    ok(train(&data, &cfg, "lace", 1, &run));
    let ckpt = run.join("lace_checkpoint.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ckpt).unwrap()).unwrap();
    v["version"] = serde_json::json!(99);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let out = lace(&["eval", "--data", p(&data), "--checkpoint", p(&bad), "--out", p(&tmp.path().join("e"))]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("version 99"), "{}", stderr(&out));
}
