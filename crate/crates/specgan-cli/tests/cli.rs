//! End-to-end checks of the binary: exit codes, artifact layout, determinism,
//! and manifest-driven reproduction.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_specgan");

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("specgan-cli-{}-{name}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("SPECGAN_OUT_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn small_config(out_dir: &Path, iters: u64, seed: u64) -> String {
    format!(
        r#"{{
  "controller": "spectral-norm",
  "iters": {iters},
  "seed": {seed},
  "batch": 8,
  "disc_dims": [2, 6, 1],
  "gen_dims": [4, 8, 2],
  "eval_every": 20,
  "eval_samples": 50,
  "lip_pairs": 8,
  "out_dir": "{}"
}}"#,
        out_dir.display()
    )
}

#[test]
fn train_zero_iterations_writes_init_checkpoint_only() {
    let dir = tmp("zero");
    let out_dir = dir.join("run");
    let cfg = write_config(&dir, "cfg.json", &small_config(&out_dir, 0, 1));
    let out = run(&["train", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("checkpoint_init.json").exists());
    assert!(out_dir.join("manifest.json").exists());
    assert!(!out_dir.join("metrics.csv").exists());
    assert!(!out_dir.join("checkpoint_final.json").exists());
}

#[test]
fn train_same_seed_twice_gives_byte_identical_metrics() {
    let dir = tmp("determinism");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    let cfg_a = write_config(&dir, "a.json", &small_config(&out_a, 40, 5));
    let cfg_b = write_config(&dir, "b.json", &small_config(&out_b, 40, 5));
    assert_eq!(
        code(&run(&["train", "--config", cfg_a.to_str().unwrap()], &[])),
        0
    );
    assert_eq!(
        code(&run(&["train", "--config", cfg_b.to_str().unwrap()], &[])),
        0
    );
    let a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn divergence_gamma_default_is_recorded_in_manifest() {
    let dir = tmp("manifest-gamma");
    let out_dir = dir.join("run");
    let cfg = write_config(
        &dir,
        "cfg.json",
        &format!(
            r#"{{"controller": "divergence", "iters": 0, "out_dir": "{}"}}"#,
            out_dir.display()
        ),
    );
    assert_eq!(
        code(&run(&["train", "--config", cfg.to_str().unwrap()], &[])),
        0
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["gamma"], serde_json::json!(0.05));
    assert_eq!(manifest["config"]["ref_scale"], serde_json::json!(0.5));
    assert_eq!(manifest["config"]["lambda"], serde_json::json!(10.0));
    assert!(manifest["version"].is_string());
}

#[test]
fn malformed_config_exits_2_with_diagnostics() {
    let dir = tmp("badcfg");
    let cfg = write_config(&dir, "cfg.json", r#"{"lamda": 10}"#);
    let out = run(&["train", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));

    let missing = dir.join("nope.json");
    let out = run(&["train", "--config", missing.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);
}

#[test]
fn out_dir_env_var_overrides_config() {
    let dir = tmp("envdir");
    let ignored = dir.join("ignored");
    let forced = dir.join("forced");
    let cfg = write_config(&dir, "cfg.json", &small_config(&ignored, 0, 2));
    let out = run(
        &["train", "--config", cfg.to_str().unwrap()],
        &[("SPECGAN_OUT_DIR", forced.to_str().unwrap())],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(forced.join("checkpoint_init.json").exists());
    assert!(!ignored.exists());
}

#[test]
fn rerunning_from_manifest_reproduces_metrics_bytes() {
    let dir = tmp("reproduce");
    let out_a = dir.join("a");
    let cfg = write_config(&dir, "cfg.json", &small_config(&out_a, 40, 7));
    assert_eq!(
        code(&run(&["train", "--config", cfg.to_str().unwrap()], &[])),
        0
    );

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("manifest.json")).unwrap())
            .unwrap();
    let replay_cfg = write_config(
        &dir,
        "replay.json",
        &serde_json::to_string(&manifest["config"]).unwrap(),
    );
    let out_b = dir.join("b");
    let out = run(
        &["train", "--config", replay_cfg.to_str().unwrap()],
        &[("SPECGAN_OUT_DIR", out_b.to_str().unwrap())],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(out_a.join("metrics.csv")).unwrap(),
        std::fs::read(out_b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn gradcheck_passes_and_enumerates_components() {
    let out = run(&["gradcheck", "--seed", "0"], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let component_lines = stdout.lines().filter(|l| l.contains("rel err")).count();
    assert!(component_lines >= 10, "{stdout}");
    assert!(stdout.contains("worst:"));
}

#[test]
fn spectra_from_fresh_init_is_all_ones_with_full_row_count() {
    let dir = tmp("spectra");
    let out_dir = dir.join("run");
    let cfg = write_config(&dir, "cfg.json", &small_config(&out_dir, 0, 3));
    assert_eq!(
        code(&run(&["train", "--config", cfg.to_str().unwrap()], &[])),
        0
    );
    let csv = dir.join("spectra.csv");
    let out = run(
        &[
            "spectra",
            "--checkpoint",
            out_dir.join("checkpoint_init.json").to_str().unwrap(),
            "--out",
            csv.to_str().unwrap(),
            "--plot",
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    // dims [2,6,1] gives ranks 2 and 1.
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert!(row.ends_with(",1"), "fresh init value should be 1: {row}");
    }
    assert!(csv.with_extension("svg").exists());
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tmp("corrupt");
    let bad = dir.join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = run(
        &[
            "spectra",
            "--checkpoint",
            bad.to_str().unwrap(),
            "--out",
            dir.join("x.csv").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn genbound_prints_appends_and_validates() {
    let dir = tmp("genbound");
    let csv = dir.join("genbound.csv");
    let base = [
        "genbound", "--n", "10000", "--d", "4", "--depth", "2", "--bx", "1.0", "--bw", "1.0,1.0",
        "--rho", "1.0", "--delta", "0.1",
    ];
    let mut args: Vec<&str> = base.to_vec();
    args.extend(["--out", csv.to_str().unwrap()]);
    let out = run(&args, &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("spectrum-constrained regime"));
    assert!(stdout.contains("7.20396940854480"), "{stdout}");

    assert_eq!(code(&run(&args, &[])), 0);
    let lines = std::fs::read_to_string(&csv).unwrap().lines().count();
    assert_eq!(lines, 3, "header plus two appended rows");

    let mut bad: Vec<&str> = base.to_vec();
    bad[14] = "1.5";
    bad.extend(["--out", csv.to_str().unwrap()]);
    assert_eq!(code(&run(&bad, &[])), 2);
}
