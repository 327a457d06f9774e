//! Series classification with two labelled demonstration examples packed in
//! front of each query.
//!
//! cargo run --release --example classify_fsca -- [epochs]

use ctxalign::backbone::{BackboneConfig, LossKind};
use ctxalign::harness::config::DataSource;
use ctxalign::harness::{run_training, RunConfig, RunOptions};
use ctxalign::metrics::MetricValues;
use ctxalign::model::TaskKind;

fn main() -> ctxalign::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(8);
    let mut cfg = RunConfig::default();
    cfg.model.task = TaskKind::Classify;
    cfg.model.classes = 2;
    cfg.model.class_examples = 2;
    cfg.model.input_len = 48;
    cfg.model.prompt = Some("which class?".into());
    cfg.model.patch_len = 8;
    cfg.model.patch_stride = 8;
    cfg.model.backbone = BackboneConfig {
        layers: 2,
        width: 32,
        heads: 4,
        insertion_positions: vec![0, 2],
        max_seq_len: 128,
        ..Default::default()
    };
    cfg.data.source = DataSource::SynthClass;
    cfg.data.per_class = 40;
    cfg.train.loss = LossKind::Ce;
    cfg.train.lr0 = 1e-3;
    cfg.train.batch_size = 16;
    cfg.train.max_epochs = epochs;

    let run = run_training(&cfg, &RunOptions::default())?;
    for h in &run.report.history {
        println!("{}", h.line());
    }
    if let (MetricValues::Accuracy { accuracy }, Some(MetricValues::Accuracy { accuracy: base })) =
        (&run.report.test.values, &run.report.test.baseline)
    {
        println!("test accuracy {accuracy:.3} (majority class {base:.3})");
    }
    for (i, (_, label)) in run.model.class_examples().iter().enumerate() {
        println!("demonstration {i}: class {label}");
    }
    Ok(())
}
