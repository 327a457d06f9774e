//! Trains a two-part few-shot forecaster on a noisy sine mixture and compares
//! it with repeating the last observed value.
//!
//! cargo run --release --example forecast_sine -- [epochs] [window_stride]

use ctxalign::backbone::BackboneConfig;
use ctxalign::harness::{run_training, RunConfig, RunOptions};
use ctxalign::metrics::MetricValues;
use ctxalign::model::ModelConfig;

fn main() -> ctxalign::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut cfg = RunConfig {
        model: ModelConfig {
            parts: 2,
            backbone: BackboneConfig {
                layers: 2,
                width: 64,
                heads: 4,
                insertion_positions: vec![0, 2],
                max_seq_len: 128,
                ..Default::default()
            },
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.train.max_epochs = args.first().copied().unwrap_or(10);
    cfg.train.lr0 = 5e-4;
    cfg.data.window_stride = args.get(1).copied().unwrap_or(4);

    let start = std::time::Instant::now();
    let run = run_training(&cfg, &RunOptions { verbose: true, ..Default::default() })?;
    for h in &run.report.history {
        println!("{}", h.line());
    }
    if let (MetricValues::Point { mse, mae, .. }, Some(MetricValues::Point { mse: bm, mae: ba, .. })) =
        (&run.report.test.values, &run.report.test.baseline)
    {
        println!("test mse {mse:.5} mae {mae:.5}");
        println!("last-value mse {bm:.5} mae {ba:.5}");
    }
    println!("{} test windows, {:.1}s", run.report.test.samples, start.elapsed().as_secs_f64());
    Ok(())
}
