//! End-to-end runs of the `pdlab` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

use pdlab_core::encoder::{EncoderConfig, TowerConfig};
use pdlab_core::synth::DataConfig;
use pdlab_core::ExperimentConfig;

fn tiny(dir: &Path) -> std::path::PathBuf {
    let tower = |width| TowerConfig {
        layers: 1,
        width,
        heads: 2,
        mlp_ratio: 2,
    };
    let mut c = ExperimentConfig {
        encoder: EncoderConfig {
            text: tower(16),
            image: tower(12),
            joint_dim: 8,
            ..EncoderConfig::default()
        },
        data: DataConfig {
            source_ids: 16,
            source_val_ids: 2,
            source_test_ids: 4,
            source_images_per_id: 2,
            target_train_ids: 6,
            target_test_ids: 4,
            target_images_per_id: 2,
            ..DataConfig::default()
        },
        batch_size: 8,
        seeds: vec![0],
        ..ExperimentConfig::default()
    };
    c.schedule.total_epochs = 2;
    c.schedule.warmup_epochs = 1;
    c.pretrain_schedule.total_epochs = 2;
    c.pretrain_schedule.warmup_epochs = 1;
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    path
}

fn pdlab(dir: &Path, args: &[&str]) -> Output {
    let config = tiny(dir);
    Command::new(env!("CARGO_BIN_EXE_pdlab"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn commands_chain_from_corpus_to_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(ok(&pdlab(dir, &["gen-data", "--seed", "0"])).contains("identities"));

    let pre: serde_json::Value = serde_json::from_str(&ok(&pdlab(dir, &["pretrain"]))).unwrap();
    assert_eq!(pre.as_array().unwrap().len(), 2);
    assert!(dir.join("out/backbone/manifest.json").exists());

    let adapt: serde_json::Value = serde_json::from_str(&ok(&pdlab(dir, &["adapt", "--strategy", "two-stage"]))).unwrap();
    let r1 = adapt["rank1"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&r1));
    let run = dir.join("out/runs/two_stage/seed0");
    assert!(run.exists());

    let ckpt = std::fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.join("manifest.json").exists())
        .expect("a checkpoint directory");
    let dump = dir.join("ranks.csv");
    let eval = ok(&pdlab(
        dir,
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dump-rankings", dump.to_str().unwrap()],
    ));
    let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert!(eval["rank1"].is_number());
    assert!(std::fs::read_to_string(&dump).unwrap().lines().count() > 1);

    ok(&pdlab(dir, &["ablate", "--lengths", "1,2", "--seeds", "1"]));
    assert!(dir.join("out/reports/prompt_length.csv").exists());
}

#[test]
fn global_flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pdlab(tmp.path(), &["adapt", "--strategy", "baseline", "--epochs", "1", "--lambda", "0.5"]);
    ok(&out);
    let bad = pdlab(tmp.path(), &["adapt", "--strategy", "baseline", "--prompt-dropout", "1.5"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = pdlab(tmp.path(), &["adapt", "--strategy", "three-stage"]);
    assert_eq!(unknown.status.code(), Some(2));
    let missing = pdlab(tmp.path(), &["eval", "--checkpoint", tmp.path().join("nope").to_str().unwrap()]);
    assert!(!missing.status.success());
    assert_ne!(missing.status.code(), Some(2));
}
