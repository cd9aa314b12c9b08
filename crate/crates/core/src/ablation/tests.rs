use super::*;
use crate::ppo::PpoConfig;
use crate::testkit::{tiny_env, tiny_model, tiny_suites};

fn config(dir: &Path) -> RunConfig {
    let suite_dir = dir.join("suites");
    tiny_suites(8, 10).0.write(&suite_dir, false).unwrap();
    RunConfig {
        seed: 4,
        model: tiny_model(),
        ppo: PpoConfig {
            epochs: 1,
            updates: 1,
            episodes_per_update: 3,
            horizon: 6,
            minibatches: 1,
            ..PpoConfig::default()
        },
        env: tiny_env(),
        suite_dir,
        out_dir: None,
        checkpoint_every: 1,
        eval_every: 0,
        max_env_steps: None,
    }
}

#[test]
fn table_has_four_rows_and_six_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = dir.path().join("ablate");
    let (table, errors) = ablate(&cfg, &out, "test", &TrainOptions::default()).unwrap();
    assert!(errors.is_empty());
    let names: Vec<&str> = table.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(names, ["DMTF", "w/o MTI", "w/o PE", "w/o ENSA"]);
    assert_eq!(table.eval_suites, ["test_heard", "test_unheard"]);
    for r in &table.rows {
        assert!(r.error.is_none(), "{:?}", r.error);
        assert!(r.values().iter().all(Option::is_some));
        assert_eq!(r.heard.as_ref().unwrap().ablation, r.ablation);
    }
    let text = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "model,sna_heard,sr_heard,spl_heard,sna_unheard,sr_unheard,spl_unheard");
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 7));
    let back: AblationTable = serde_json::from_slice(&fs::read(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(back, table);
    for tag in ["none", "no-mti", "no-pe", "no-ensa"] {
        assert!(out.join(tag).join("ckpt_000001.bin").exists(), "{tag}");
    }
}

#[test]
fn failing_variant_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    // A non-square patch has no convolutional counterpart.
    cfg.model.patch = 2;
    let out = dir.path().join("ablate");
    let (table, errors) = ablate(&cfg, &out, "val", &TrainOptions::default()).unwrap();
    assert_eq!(errors.iter().map(Error::exit_code).collect::<Vec<_>>(), [2]);
    let failed: Vec<&str> = table.failures().map(|r| r.ablation.as_str()).collect();
    assert_eq!(failed, ["no-pe"]);
    assert!(table.row("no-pe").unwrap().error.as_ref().unwrap().contains("square"));
    assert!(table.row("none").unwrap().heard.is_some());
    let text = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(text.lines().any(|l| l == "w/o PE,,,,,,"));
}
