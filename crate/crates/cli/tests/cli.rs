//! End-to-end checks of the pipeline binary: exit codes, determinism,
//! and the structure-path ablation producing the reference loss curve.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_grnformer"))
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn small_synth_config(dir: &Path, seed: u64) -> String {
    format!(
        r#"{{
  "synthetic": {{
    "cells": 30, "genes": 24, "tfs": 4, "cell_types": 2,
    "mean_targets_per_tf": 3, "bimodal_fraction": 0.5,
    "noise": 0.1, "seed": {seed}
  }},
  "out_dir": "{}"
}}"#,
        dir.display()
    )
}

fn run_ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen_dataset(dir: &Path, seed: u64) {
    let cfg = dir.join("synth.json");
    write(&cfg, &small_synth_config(&dir.join("data"), seed));
    run_ok(bin().args(["synth", "--config"]).arg(&cfg).output().unwrap());
}

#[test]
fn missing_subcommand_is_usage_error() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = bin().args(["synth", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_config_flag_is_usage_error() {
    let out = bin().args(["synth"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--config"), "{err}");
}

#[test]
fn missing_config_file_is_data_error_naming_the_path() {
    let out = bin()
        .args(["synth", "--config", "/nonexistent/cfg.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/cfg.json"), "{err}");
}

#[test]
fn unknown_config_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    write(&cfg, r#"{"synthetic": {"cells": 10}, "typo_key": 1}"#);
    let out = bin().args(["synth", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("typo_key"), "{err}");
}

#[test]
fn synth_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg1 = dir.path().join("a.json");
    let cfg2 = dir.path().join("b.json");
    write(&cfg1, &small_synth_config(&dir.path().join("out_a"), 7));
    write(&cfg2, &small_synth_config(&dir.path().join("out_b"), 7));
    run_ok(bin().args(["synth", "--config"]).arg(&cfg1).output().unwrap());
    run_ok(bin().args(["synth", "--config"]).arg(&cfg2).output().unwrap());
    let a = fs::read(dir.path().join("out_a/manifest.json")).unwrap();
    let b = fs::read(dir.path().join("out_b/manifest.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_env_fallback_matches_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg1 = dir.path().join("a.json");
    let cfg2 = dir.path().join("b.json");
    write(&cfg1, &small_synth_config(&dir.path().join("out_flag"), 1));
    write(&cfg2, &small_synth_config(&dir.path().join("out_env"), 1));
    run_ok(
        bin()
            .args(["synth", "--seed", "99", "--config"])
            .arg(&cfg1)
            .output()
            .unwrap(),
    );
    run_ok(
        bin()
            .env("GRNFORMER_SEED", "99")
            .args(["synth", "--config"])
            .arg(&cfg2)
            .output()
            .unwrap(),
    );
    let a = fs::read(dir.path().join("out_flag/expression.tsv")).unwrap();
    let b = fs::read(dir.path().join("out_env/expression.tsv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn build_grn_recovers_planted_edges() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 3);
    let cfg = dir.path().join("build.json");
    write(
        &cfg,
        &format!(
            r#"{{"manifest": "{}", "out_dir": "{}"}}"#,
            dir.path().join("data").display(),
            dir.path().join("grn_out").display()
        ),
    );
    run_ok(bin().args(["build-grn", "--config"]).arg(&cfg).output().unwrap());
    let edges = fs::read_to_string(dir.path().join("grn_out/built_grn.tsv")).unwrap();
    // Planted targets correlate strongly with their TF and sit in the
    // proximity window, so the linker should find a non-trivial edge set.
    assert!(edges.lines().count() > 4, "{edges}");
    assert!(dir.path().join("grn_out/degree_stats.json").exists());
}

#[test]
fn activity_emits_reports_and_cell_grns() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 4);
    let cfg = dir.path().join("activity.json");
    write(
        &cfg,
        &format!(
            r#"{{"manifest": "{}", "top_fraction": 0.2, "out_dir": "{}"}}"#,
            dir.path().join("data").display(),
            dir.path().join("act_out").display()
        ),
    );
    run_ok(bin().args(["activity", "--config"]).arg(&cfg).output().unwrap());
    for file in ["activity.tsv", "thresholds.json", "cell_grns.tsv"] {
        assert!(dir.path().join("act_out").join(file).exists(), "{file}");
    }
}

fn tiny_train_block(alpha: f64, beta: f64, backbone_only: bool) -> String {
    format!(
        r#""train": {{
    "alpha": {alpha}, "beta": {beta}, "batch_size": 2, "steps": 5, "seed": 21,
    "fusion_heads": 2,
    "backbone": {{"hidden": 16, "layers": 1, "heads": 2, "feed_forward": 32,
                  "mask_ratio": 0.2, "max_genes": 32}},
    "sage": {{"layers": 1, "sample_size": 4, "hidden": 16}}
  }},
  "top_fraction": 0.2,
  "backbone_only": {backbone_only}"#
    )
}

#[test]
fn double_ablation_loss_curve_matches_reference_run() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 5);
    let data = dir.path().join("data");
    for (name, block) in [
        ("ablated", tiny_train_block(0.0, 0.0, false)),
        ("reference", tiny_train_block(0.0, 0.0, true)),
    ] {
        let cfg = dir.path().join(format!("{name}.json"));
        write(
            &cfg,
            &format!(
                r#"{{"manifest": "{}", {block}, "out_dir": "{}"}}"#,
                data.display(),
                dir.path().join(name).display()
            ),
        );
        run_ok(bin().args(["pretrain", "--config"]).arg(&cfg).output().unwrap());
    }
    let a = fs::read_to_string(dir.path().join("ablated/loss.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("reference/loss.csv")).unwrap();
    let parse = |text: &str| -> Vec<f64> {
        text.lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect()
    };
    let (la, lb) = (parse(&a), parse(&b));
    assert_eq!(la.len(), 5);
    for (x, y) in la.iter().zip(&lb) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn analyze_and_eval_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 6);
    let data = dir.path().join("data");
    let pre_cfg = dir.path().join("pretrain.json");
    write(
        &pre_cfg,
        &format!(
            r#"{{"manifest": "{}", {}, "out_dir": "{}"}}"#,
            data.display(),
            tiny_train_block(0.2, 1.0, false),
            dir.path().join("pre").display()
        ),
    );
    run_ok(bin().args(["pretrain", "--config"]).arg(&pre_cfg).output().unwrap());
    let ckpt = dir.path().join("pre/checkpoint.json");

    let an_cfg = dir.path().join("analyze.json");
    write(
        &an_cfg,
        &format!(
            r#"{{"manifest": "{}", "checkpoint": "{}", "top_fraction": 0.2,
                 "eval_cells": 6, "dump_attention": 1, "out_dir": "{}"}}"#,
            data.display(),
            ckpt.display(),
            dir.path().join("an").display()
        ),
    );
    run_ok(bin().args(["analyze", "--config"]).arg(&an_cfg).output().unwrap());
    assert!(dir.path().join("an/attention_report.json").exists());
    assert!(dir.path().join("an/degree_attention.tsv").exists());
    let dumps: Vec<_> = fs::read_dir(dir.path().join("an"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("attention_cell"))
        .collect();
    assert_eq!(dumps.len(), 2, "one TSV and one JSON sidecar");

    let ev_cfg = dir.path().join("eval.json");
    write(
        &ev_cfg,
        &format!(
            r#"{{"manifest": "{}", "checkpoint": "{}", "top_fraction": 0.2,
                 "n_pairs": 8, "finetune_steps": 3, "holdout_every": 2,
                 "out_dir": "{}"}}"#,
            data.display(),
            ckpt.display(),
            dir.path().join("ev").display()
        ),
    );
    run_ok(bin().args(["eval", "--config"]).arg(&ev_cfg).output().unwrap());
    let metrics = fs::read_to_string(dir.path().join("ev/metrics.csv")).unwrap();
    assert!(metrics.contains("pcc_delta,held_out_mean"), "{metrics}");
    assert!(metrics.contains("roc_auc,held_out_mean"), "{metrics}");
}
