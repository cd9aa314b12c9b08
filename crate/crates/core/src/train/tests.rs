use std::fs;
use std::path::Path;

use super::*;
use crate::testkit::{tiny_env, tiny_model, tiny_suites};

fn setup(dir: &Path, updates: usize) -> RunConfig {
    let suite_dir = dir.join("suites");
    let (set, _) = tiny_suites(5, 12);
    set.write(&suite_dir, false).unwrap();
    RunConfig {
        seed: 11,
        model: tiny_model(),
        ppo: PpoConfig {
            epochs: 2,
            updates,
            episodes_per_update: 4,
            horizon: 8,
            minibatches: 2,
            lr: 1e-3,
            ..PpoConfig::default()
        },
        env: tiny_env(),
        suite_dir,
        out_dir: None,
        checkpoint_every: 1,
        eval_every: 1,
        max_env_steps: None,
    }
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn single_update_produces_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 1);
    let out = dir.path().join("run");
    let outcome = train(&cfg, &out, &TrainOptions::default()).unwrap();
    assert_eq!(outcome.rows.len(), 1);
    assert_eq!(outcome.checkpoints, vec![out.join("ckpt_000001.bin")]);
    let (net, meta) = load_checkpoint(&outcome.checkpoints[0]).unwrap();
    assert_eq!(meta.update, 1);
    assert_eq!(meta.env_steps, outcome.rows[0].env_steps);
    assert_eq!(meta.config, cfg);
    assert_eq!(net.num_params(), DmtfNet::new(cfg.model.clone(), 0).unwrap().num_params());
    let header = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert!(header.starts_with(
        "update,env_steps,mean_return,surrogate,value_loss,entropy,matching_loss,sr_val,spl_val,sna_val"
    ));
    assert!(out.join("val_heard.json").exists());
}

#[test]
fn reloaded_checkpoint_evaluates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 1);
    let out = dir.path().join("run");
    let outcome = train(&cfg, &out, &TrainOptions::default()).unwrap();
    let (net, meta) = load_checkpoint(&outcome.checkpoints[0]).unwrap();
    let suites = SuiteFiles::load(&cfg.suite_dir, 1).unwrap();
    let report = evaluate(
        Agent::Policy(&net),
        &cfg.env,
        &suites.manifest,
        &suites.val_heard,
        &meta.train_templates,
        &EvalOptions::default(),
    )
    .unwrap()
    .report;
    assert_eq!(report, outcome.val_heard);
}

#[test]
fn runs_are_bitwise_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train(&cfg, &a, &TrainOptions::default()).unwrap();
    train(&cfg, &b, &TrainOptions { workers: 3, resume: false }).unwrap();
    for f in [METRICS_FILE, "ckpt_000002.bin", "ckpt_000002.opt", "val_heard.csv", "val_heard.json"] {
        assert_eq!(bytes(&a.join(f)), bytes(&b.join(f)), "{f}");
    }
}

#[test]
fn resume_continues_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let full = setup(dir.path(), 3);
    let a = dir.path().join("a");
    train(&full, &a, &TrainOptions::default()).unwrap();

    // Interrupted after update 2, with update 3's row already half-written away.
    let b = dir.path().join("b");
    let short = RunConfig {
        ppo: PpoConfig { updates: 2, ..full.ppo.clone() },
        ..full.clone()
    };
    train(&short, &b, &TrainOptions::default()).unwrap();
    let resumed = train(&full, &b, &TrainOptions { workers: 1, resume: true }).unwrap();
    assert_eq!(resumed.checkpoints, vec![b.join("ckpt_000003.bin")]);
    for f in [METRICS_FILE, "ckpt_000003.bin", "ckpt_000003.opt", "val_heard.csv"] {
        assert_eq!(bytes(&a.join(f)), bytes(&b.join(f)), "{f}");
    }

    // Rows past the restored checkpoint are dropped and recomputed.
    let c = dir.path().join("c");
    fs::create_dir_all(&c).unwrap();
    for f in ["ckpt_000001.json", "ckpt_000001.bin", "ckpt_000001.opt", METRICS_FILE] {
        fs::copy(a.join(f), c.join(f)).unwrap();
    }
    train(&full, &c, &TrainOptions { workers: 2, resume: true }).unwrap();
    assert_eq!(bytes(&a.join(METRICS_FILE)), bytes(&c.join(METRICS_FILE)));
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 1);
    let out = dir.path().join("run");
    train(&cfg, &out, &TrainOptions::default()).unwrap();
    let other = RunConfig { seed: 12, ..cfg.clone() };
    let err = train(&other, &out, &TrainOptions { workers: 1, resume: true }).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    let err = train(&cfg, &out, &TrainOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn ablation_is_recorded_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 1).with_ablation(AblationFlags::from_tag("no-mti").unwrap());
    let out = dir.path().join("run");
    let outcome = train(&cfg, &out, &TrainOptions::default()).unwrap();
    let (_, meta) = load_checkpoint(&outcome.checkpoints[0]).unwrap();
    assert_eq!((meta.num_targets, meta.ablation.as_str()), (1, "no-mti"));
}

#[test]
fn divergence_writes_a_dump_and_exits_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), 3);
    cfg.ppo.lr = 1e300;
    cfg.ppo.max_grad_norm = 1e300;
    let out = dir.path().join("run");
    let err = train(&cfg, &out, &TrainOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
    let dump: serde_json::Value = serde_json::from_slice(&bytes(&out.join(NAN_DUMP_FILE))).unwrap();
    assert!(dump["update"].as_u64().unwrap() >= 1);
    assert!(!dump["message"].as_str().unwrap().is_empty());
}

#[test]
fn config_validation_names_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 1);
    let mut bad = cfg.clone();
    bad.model.image = [16, 16, 3];
    let err = bad.validate().unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("model.image")), "{err}");
    let mut bad = cfg.clone();
    bad.ppo.clip = 0.0;
    assert!(bad.validate().unwrap_err().to_string().contains("ppo.clip"));

    let path = dir.path().join("cfg.json");
    let mut doc = serde_json::to_value(&cfg).unwrap();
    doc["suite_dir"] = "suites".into();
    fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
    let loaded = RunConfig::load(&path).unwrap();
    assert_eq!(loaded.suite_dir, dir.path().join("suites"));
    doc["learning_rate"] = 0.1.into();
    fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
    let err = RunConfig::load(&path).unwrap_err();
    assert!(err.to_string().contains("learning_rate"), "{err}");
}

#[test]
fn missing_suites_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), 1);
    cfg.suite_dir = dir.path().join("nowhere");
    let err = train(&cfg, &dir.path().join("run"), &TrainOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn step_budget_ends_training_early() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), 50);
    cfg.eval_every = 0;
    cfg.checkpoint_every = 100;
    cfg.max_env_steps = Some(20);
    let out = dir.path().join("run");
    let outcome = train(&cfg, &out, &TrainOptions::default()).unwrap();
    let last = outcome.rows.last().unwrap();
    assert!(last.env_steps >= 20 && outcome.rows.len() < 50);
    assert!(outcome.rows[..outcome.rows.len() - 1].iter().all(|r| r.env_steps < 20 && r.sr_val.is_none()));
    assert!(last.sr_val.is_some());
    assert_eq!(outcome.checkpoints, vec![CheckpointPaths::for_update(&out, last.update).weights]);
}
