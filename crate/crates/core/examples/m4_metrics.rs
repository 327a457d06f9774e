//! SMAPE, MASE and OWA of a seasonal-naive forecast against the Naive2
//! reference on a synthetic quarterly-like series.
//!
//! cargo run --example m4_metrics

use ctxalign::data::{synth_generate, SynthKind, SynthParams};
use ctxalign::metrics::{is_seasonal, m4_metrics, naive2, MaseScaling, SeasonalityTest};

fn main() -> ctxalign::Result<()> {
    let s = 4;
    let params = SynthParams {
        period: s as f64,
        noise: 0.2,
        ..Default::default()
    };
    let series = synth_generate(SynthKind::TrendSeasonal, 48, 11, &params)?.channel(0);
    let (insample, y) = series.split_at(40);
    let h = y.len();

    let n2 = naive2(insample, h, s, SeasonalityTest::Acf90)?;
    // seasonal naive: repeat the last observed season
    let snaive: Vec<f64> = (0..h).map(|k| insample[insample.len() - s + k % s]).collect();
    let r = m4_metrics(y, &snaive, insample, s, &n2, MaseScaling::Insample)?;

    println!("seasonal by the 90% autocorrelation test: {}", is_seasonal(insample, s));
    println!("naive2:         {n2:.3?}");
    println!("seasonal naive: {snaive:.3?}");
    println!("actual:         {y:.3?}");
    println!("smape {:.3}  mase {:.3}  owa {:.3}", r.smape, r.mase, r.owa);
    Ok(())
}
