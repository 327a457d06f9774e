//! Trains on one synthetic family and forecasts another without retraining.
//!
//! cargo run --release --example zero_shot_transfer -- [epochs]

use ctxalign::backbone::BackboneConfig;
use ctxalign::data::{synth_generate, zero_shot_windows, SynthKind, SynthParams};
use ctxalign::harness::{run_training, RunConfig, RunOptions};
use ctxalign::metrics::{point_metrics, ForecastAccumulator};

fn main() -> ctxalign::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let mut cfg = RunConfig::default();
    cfg.model.input_len = 64;
    cfg.model.horizon = 16;
    cfg.model.prompt = Some("continue the series:".into());
    cfg.model.backbone = BackboneConfig {
        layers: 2,
        width: 32,
        heads: 4,
        insertion_positions: vec![0, 2],
        max_seq_len: 96,
        ..Default::default()
    };
    cfg.data.synth_kind = SynthKind::SineMix;
    cfg.data.window_stride = 8;
    cfg.train.max_epochs = epochs;
    cfg.train.lr0 = 5e-4;
    let run = run_training(&cfg, &RunOptions::default())?;
    println!("source test mse {:.4}", run.report.test.values.selection_score());

    let target = synth_generate(SynthKind::TrendSeasonal, 1500, 3, &SynthParams::default())?;
    let windows = zero_shot_windows(&target, 64, 16, 8, cfg.data.split)?;
    let mut model_acc = ForecastAccumulator::default();
    let mut last_acc = ForecastAccumulator::default();
    for w in &windows {
        model_acc.push(&w.target, &run.model.predict(&w.input)?)?;
        let last = *w.input.last().expect("non-empty window");
        last_acc.push(&w.target, &vec![last; w.target.len()])?;
    }
    let (mse, mae) = model_acc.aggregate();
    let (bmse, bmae) = last_acc.aggregate();
    println!("target ({} windows): mse {mse:.4} mae {mae:.4}", windows.len());
    println!("last value:            mse {bmse:.4} mae {bmae:.4}");
    let first = &windows[0];
    let (m1, _) = point_metrics(&first.target, &run.model.predict(&first.input)?)?;
    println!("first window mse {m1:.4}");
    Ok(())
}
