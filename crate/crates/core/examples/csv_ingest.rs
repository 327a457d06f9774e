//! Writes a two-channel series to CSV, reads it back with forward filling,
//! and trains on a channel subset from the file.
//!
//! cargo run --release --example csv_ingest

use ctxalign::backbone::BackboneConfig;
use ctxalign::data::{load_csv, synth_generate, write_csv, CsvOptions, MissingPolicy, SynthKind, SynthParams};
use ctxalign::harness::config::DataSource;
use ctxalign::harness::{run_training, RunConfig, RunOptions};

fn main() -> ctxalign::Result<()> {
    let dir = std::env::temp_dir().join("ctxalign-csv-example");
    std::fs::create_dir_all(&dir).map_err(|e| ctxalign::Error::Config(e.to_string()))?;
    let path = dir.join("ar2.csv");
    let series = synth_generate(SynthKind::Ar2, 800, 2, &SynthParams { channels: 2, ..Default::default() })?;
    let file = std::fs::File::create(&path).map_err(|e| ctxalign::Error::Config(e.to_string()))?;
    write_csv(&series, file)?;

    let opts = CsvOptions {
        missing: MissingPolicy::ForwardFill,
        ..Default::default()
    };
    let back = load_csv(&path, &opts)?;
    println!("{}: {} rows x {} channels {:?}", back.name, back.len(), back.dims(), back.columns);

    let mut cfg = RunConfig::default();
    cfg.data.source = DataSource::Csv;
    cfg.data.path = Some(path);
    cfg.data.missing = MissingPolicy::ForwardFill;
    cfg.data.channel_subset = vec![1];
    cfg.data.window_stride = 8;
    cfg.model.input_len = 48;
    cfg.model.horizon = 12;
    cfg.model.patch_len = 8;
    cfg.model.patch_stride = 8;
    cfg.model.prompt = Some("predict next:".into());
    cfg.model.backbone = BackboneConfig {
        layers: 1,
        width: 32,
        heads: 4,
        insertion_positions: vec![0, 1],
        max_seq_len: 64,
        ..Default::default()
    };
    cfg.train.max_epochs = 3;
    cfg.train.lr0 = 1e-3;
    let run = run_training(&cfg, &RunOptions::default())?;
    for h in &run.report.history {
        println!("{}", h.line());
    }
    println!("{}", run.report.test.to_json()?);
    Ok(())
}
