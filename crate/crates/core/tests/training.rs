use ctxalign::backbone::BackboneConfig;
use ctxalign::harness::checkpoint;
use ctxalign::harness::config::DataSource;
use ctxalign::harness::train::load_model;
use ctxalign::harness::{run_training, RunConfig, RunOptions};
use ctxalign::metrics::MetricValues;
use ctxalign::model::TaskKind;
use ctxalign::Error;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.input_len = 32;
    cfg.model.horizon = 4;
    cfg.model.patch_len = 8;
    cfg.model.patch_stride = 8;
    cfg.model.prompt = Some("next:".into());
    cfg.model.backbone = BackboneConfig {
        layers: 1,
        width: 16,
        heads: 2,
        insertion_positions: vec![0, 1],
        max_seq_len: 64,
        ..Default::default()
    };
    cfg.data.length = 400;
    cfg.data.window_stride = 8;
    cfg.train.batch_size = 8;
    cfg.train.max_epochs = 4;
    cfg.train.lr0 = 1e-3;
    cfg
}

#[test]
fn early_stopping_respects_patience() {
    let mut cfg = tiny();
    cfg.train.patience = 1;
    cfg.train.max_epochs = 30;
    cfg.train.lr0 = 0.05;
    let r = run_training(&cfg, &RunOptions::default()).unwrap().report;
    let vals: Vec<f64> = r.history.iter().map(|h| h.val_metric).collect();
    assert!(r.epochs_run < 30, "never stopped: {vals:?}");
    let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(r.best_val_metric, best);
    assert_eq!(vals[r.best_epoch], best);
    // stopped right after the first epoch that failed to improve
    let last = vals.len() - 1;
    assert!(vals[last] >= vals[..last].iter().cloned().fold(f64::INFINITY, f64::min));
    assert!(vals[..last].windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let whole = run_training(&cfg, &RunOptions::default()).unwrap().report;
    let first = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        epoch_limit: Some(2),
        ..Default::default()
    };
    let partial = run_training(&cfg, &first).unwrap().report;
    assert_eq!(partial.epochs_run, 2);
    let second = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        resume: true,
        ..Default::default()
    };
    let resumed = run_training(&cfg, &second).unwrap().report;
    assert_eq!(resumed, whole);
    let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with('#') && !l.starts_with("epoch")).count(), cfg.train.max_epochs);
}

#[test]
fn runs_are_deterministic_and_seed_dependent() {
    let cfg = tiny();
    let a = run_training(&cfg, &RunOptions::default()).unwrap();
    let b = run_training(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
    assert_eq!(a.window_csv, b.window_csv);
    let mut other = cfg.clone();
    other.train.seed = 1;
    let c = run_training(&other, &RunOptions::default()).unwrap();
    assert_ne!(a.report.history, c.report.history);
}

#[test]
fn saved_model_reloads_and_rejects_other_configs() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let run = run_training(&cfg, &opts).unwrap();
    let path = dir.path().join("model.bin");
    let loaded = load_model(&cfg, &path).unwrap();
    let x: Vec<f64> = (0..32).map(|t| (t as f64 / 3.0).sin()).collect();
    assert_eq!(loaded.predict(&x).unwrap(), run.model.predict(&x).unwrap());

    let mut other = cfg.clone();
    other.model.backbone.width = 8;
    assert!(matches!(load_model(&other, &path), Err(Error::Checkpoint(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    let bad = dir.path().join("truncated.bin");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(checkpoint::load(&bad), Err(Error::Checkpoint(_))));
}

#[test]
fn classification_runs_end_to_end() {
    let mut cfg = tiny();
    cfg.model.task = TaskKind::Classify;
    cfg.model.classes = 2;
    cfg.model.class_examples = 2;
    cfg.data.source = DataSource::SynthClass;
    cfg.data.per_class = 12;
    cfg.train.loss = ctxalign::backbone::LossKind::Ce;
    cfg.train.max_epochs = 2;
    let run = run_training(&cfg, &RunOptions::default()).unwrap();
    match run.report.test.values {
        MetricValues::Accuracy { accuracy } => assert!((0.0..=1.0).contains(&accuracy)),
        other => panic!("expected accuracy, got {other:?}"),
    }
    assert_eq!(run.model.class_examples().len(), 2);
}
