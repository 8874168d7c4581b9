use super::*;

fn tiny(dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"{{
            "tag": "tiny",
            "dataset": {{"csbm": {{"n": 30, "classes": 2, "p_in": 0.05, "p_out": 0.2,
                "means": [[1.0, 0.0], [0.0, 1.0]], "noise": 0.5, "seed": 3}}}},
            "output_dir": {:?},
            "seeds": [1],
            "train": {{"hidden": 8, "posterior_hidden": 8, "posterior_embed": 4, "decoder_hidden": 8,
                "k_train": 2, "k_eval": 2, "max_epochs": 4, "patience": 10}}
        }}"#,
        dir
    );
    ExperimentConfig::from_json(&text).unwrap()
}

#[test]
fn unknown_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::to_value(tiny(dir.path())).unwrap();
    v["train"]["lamda_sp"] = 0.1.into();
    match ExperimentConfig::from_json(&v.to_string()) {
        Err(Error::Config(msg)) => assert!(msg.contains("lamda_sp"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let mut v: serde_json::Value = serde_json::to_value(tiny(dir.path())).unwrap();
    v["extra"] = 1.into();
    assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
}

#[test]
fn dataset_source_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::to_value(tiny(dir.path())).unwrap();
    v["dataset"]["path"] = "somewhere".into();
    assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    v["dataset"] = serde_json::json!({});
    assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
}

#[test]
fn validation_rejects_bad_lists() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(dir.path());
    assert!(ExperimentConfig { seeds: vec![], ..base.clone() }.validate().is_err());
    assert!(ExperimentConfig { k_list: Some(vec![4, 1]), ..base.clone() }.validate().is_err());
    assert!(ExperimentConfig { k_list: Some(vec![0, 1]), ..base.clone() }.validate().is_err());
    assert!(ExperimentConfig { split: [0.5, 0.5, 0.5], ..base.clone() }.validate().is_err());
    let empty = GridSpec {
        lambda_sp: vec![],
        lambda_st: vec![0.1],
    };
    assert!(ExperimentConfig { grid: Some(empty), ..base }.validate().is_err());
}

#[test]
fn summary_rows_reproduce_their_statistics() {
    let s = RunSummary::new("t", vec![(1, 0.5), (2, 0.75), (3, 0.25)]);
    let rows = s.rows();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[3].seed, "mean");
    assert_eq!(rows[3].test_acc, 0.5);
    assert_eq!(rows[4].test_acc, 0.25);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("summary.csv");
    write_rows(&path, &rows).unwrap();
    assert_eq!(read_summary(&path).unwrap(), s);
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let s = run(&cfg).unwrap();
    assert_eq!(s.per_seed.len(), 1);
    let out = dir.path();
    for f in ["config.json", "summary.csv", "seed-1/metrics.csv", "seed-1/checkpoint.json", "seed-1/checkpoint.bin"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let echo = ExperimentConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(echo, cfg);
    let header = fs::read_to_string(out.join("seed-1/metrics.csv")).unwrap();
    assert!(header.starts_with("epoch,cls_loss,sparse_loss,struct_loss,total_loss,val_acc\n"));
    let rows: Vec<SummaryRow> = read_rows(&out.join("summary.csv")).unwrap();
    assert_eq!(rows.iter().filter(|r| r.seed.parse::<u64>().is_ok()).count(), 1);
}

#[test]
fn one_by_one_grid_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("run"));
    let s = run(&cfg).unwrap();
    let gcfg = ExperimentConfig {
        output_dir: dir.path().join("grid"),
        grid: Some(GridSpec {
            lambda_sp: vec![cfg.train.lambda_sp],
            lambda_st: vec![cfg.train.lambda_st],
        }),
        ..cfg
    };
    let rows = grid(&gcfg).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mean_acc, s.mean);
    let cell = read_summary(&dir.path().join("grid/cell-0-0/summary.csv")).unwrap();
    assert_eq!(cell.per_seed, s.per_seed);
}

#[test]
fn mc_study_single_k_and_gcn_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        k_list: Some(vec![1]),
        ..tiny(dir.path())
    };
    let rows = mc_study(&cfg).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].std_acc >= 0.0);
    let gcn = ExperimentConfig {
        model: ModelKind::Gcn,
        output_dir: dir.path().join("gcn"),
        ..cfg
    };
    assert!(mc_study(&gcn).is_err());
    let s = run(&gcn).unwrap();
    assert!((0.0..=1.0).contains(&s.mean));
    assert!(!dir.path().join("gcn/seed-1/checkpoint.json").exists());
}

#[test]
fn robustness_zero_cell_matches_clean_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        robustness: Some(RobustnessSpec {
            kind: PerturbationKind::DeleteEdges,
            magnitudes: vec![0.0, 0.5],
            seed: 0,
        }),
        ..tiny(dir.path())
    };
    let table = robustness(&cfg).unwrap();
    assert_eq!(table.rows.len(), 2);
    let clean = train_seed(&cfg.dataset().unwrap(), &cfg, 1).unwrap();
    assert_eq!(table.cells[0].accuracy, Some(clean.test_acc));
    assert!(dir.path().join("robustness.csv").exists());
}

#[test]
fn threads_variable_parsing() {
    std::env::remove_var(THREADS_ENV);
    assert_eq!(threads_from_env().unwrap(), None);
}

#[test]
fn support_lambda_of_orthogonal_means() {
    let c = CsbmConfig::orthogonal(30, 3, 4, 2.0, 0.1, 0.2, 0.1, 0);
    assert_eq!(support_lambda(&c), 4.0);
}
