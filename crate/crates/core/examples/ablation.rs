//! Compares the full model with its coarse-free and random-adjacency variants
//! over a few seeds.
//!
//! cargo run --release --example ablation -- [seeds] [epochs]

use ctxalign::backbone::BackboneConfig;
use ctxalign::harness::ablation::{run_ablation, AblationPlan, PlanVariant};
use ctxalign::harness::RunConfig;

fn main() -> ctxalign::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = args.first().copied().unwrap_or(2);
    let mut base = RunConfig::default();
    base.model.backbone = BackboneConfig {
        layers: 2,
        width: 32,
        heads: 4,
        insertion_positions: vec![0, 2],
        max_seq_len: 128,
        ..Default::default()
    };
    base.data.window_stride = 8;
    base.train.max_epochs = args.get(1).copied().unwrap_or(4) as usize;
    base.train.lr0 = 5e-4;
    let plan = AblationPlan {
        variants: vec![PlanVariant::Full, PlanVariant::NoCoarse, PlanVariant::RandomAdjacency],
        seeds: (0..seeds).collect(),
        ..Default::default()
    };
    let report = run_ablation(&plan, &base, |name, o| match o.test_metric {
        Some(m) => eprintln!("{name} seed {}: {m:.5}", o.seed),
        None => eprintln!("{name} seed {}: {}", o.seed, o.error.as_deref().unwrap_or("failed")),
    })?;
    for v in &report.variants {
        println!("{:<18} mean test mse {:.5}", v.name, v.mean.unwrap_or(f64::NAN));
    }
    for c in &report.checks {
        println!("{} <= {}: {:?}", c.better, c.worse, c.status);
    }
    Ok(())
}
