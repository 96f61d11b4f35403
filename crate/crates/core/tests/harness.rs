use surgift_core::harness::{csv_string, run_sweep, run_sweep_cached, summarize, ExperimentConfig, Strategy};

const TINY: &str = r#"{
    "scenario": {"name": "block_noise", "block": "block1", "sigma": 2.0},
    "data": {"dim": 6, "classes": 3, "separation": 3.0, "noise_std": 1.0},
    "model": {"hidden": [8, 8], "blocks": 2},
    "pretrain": {"n": 200, "epochs": 5, "lr": 0.01, "batch_size": 32},
    "strategies": ["all", "block1", "cross_val", "l1sp(0.001)", "gradual_fl"],
    "lr_grid": [0.01, 0.001],
    "seeds": [0, 1],
    "epochs": 3,
    "target_train_n": 40,
    "target_val_n": 40,
    "target_test_n": 60
}"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_json(TINY).unwrap()
}

#[test]
fn sweeps_are_reproducible_across_worker_counts() {
    let c = tiny();
    let one = run_sweep(&c, 1).unwrap();
    let three = run_sweep(&c, 3).unwrap();
    assert_eq!(csv_string(&one).unwrap(), csv_string(&three).unwrap());
    assert_eq!(one.len(), c.strategies.len() * c.seeds.len());
}

#[test]
fn relative_scores_and_cross_validation_bookkeeping() {
    let c = tiny();
    let runs = run_sweep(&c, 2).unwrap();
    for r in &runs {
        let all = runs.iter().find(|a| a.strategy == "all" && a.seed == r.seed).unwrap();
        let expect = r.test.unwrap() - all.test.unwrap();
        assert_eq!(r.relative, Some(expect));
        assert!(r.aborted.is_none());
    }
    let cv = runs.iter().find(|r| r.strategy == "cross_val").unwrap();
    assert_eq!(cv.child_runs, 3 * c.lr_grid.len());
    let block = cv.selected_block.unwrap();
    assert!(cv.tuned.iter().all(|t| t.starts_with(&block.to_string())));
    assert_eq!(summarize(&runs).len(), c.strategies.len());
    assert!("cross_val".parse::<Strategy>().is_ok());
}

#[test]
fn cached_pretraining_gives_identical_runs() {
    let c = tiny();
    let dir = tempfile::tempdir().unwrap();
    let fresh = run_sweep(&c, 1).unwrap();
    let first = run_sweep_cached(&c, 1, Some(dir.path())).unwrap();
    let cached = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(cached, c.seeds.len());
    let second = run_sweep_cached(&c, 1, Some(dir.path())).unwrap();
    let body = csv_string(&fresh).unwrap();
    assert_eq!(body, csv_string(&first).unwrap());
    assert_eq!(body, csv_string(&second).unwrap());
}
