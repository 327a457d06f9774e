//! Forecast and classification metrics, the Naive2 reference forecaster and
//! report serialization.
//!
//! # Naive2
//!
//! 1. If `s > 1` and the seasonality test passes, estimate multiplicative
//!    seasonal indices by classical decomposition:
//!    a centered moving average of order `s` (a `2×s` average when `s` is
//!    even), ratios `x_t / CMA_t` averaged per season position, then scaled so
//!    the indices average to 1.
//! 2. Divide the insample by its indices, repeat the last adjusted value for
//!    `H` steps, and multiply back by the indices of the forecast positions.
//! 3. Otherwise repeat the last insample value.
//!
//! The default test is the 90% autocorrelation test: the series is seasonal
//! when it has at least `3s` points and
//! `|r_s| > 1.645 · sqrt((1 + 2 Σ_{k<s} r_k²) / n)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SMAPE_FLOOR: f64 = 1e-8;

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("metric on empty input".into()));
    }
    if y.len() != yhat.len() {
        return Err(Error::dim("metric", format!("{} targets vs {} predictions", y.len(), yhat.len())));
    }
    Ok(())
}

/// `(mse, mae)`.
pub fn point_metrics(y: &[f64], yhat: &[f64]) -> Result<(f64, f64)> {
    check_pair(y, yhat)?;
    let h = y.len() as f64;
    let mse = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / h;
    let mae = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / h;
    Ok((mse, mae))
}

/// `(200/H) Σ |y − ŷ| / (|y| + |ŷ|)`, denominator floored.
pub fn smape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let s: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| (a - b).abs() / (a.abs() + b.abs()).max(SMAPE_FLOOR))
        .sum();
    Ok(200.0 * s / y.len() as f64)
}

/// Which series supplies the MASE scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaseScaling {
    /// Mean seasonal absolute difference of the insample history.
    #[default]
    Insample,
    /// Mean seasonal absolute difference of the forecast-window targets.
    ForecastWindow,
}

pub fn mase_scale(y: &[f64], insample: &[f64], s: usize, scaling: MaseScaling) -> Result<f64> {
    if s == 0 {
        return Err(Error::InvalidArgument("seasonality s must be >= 1".into()));
    }
    let series = match scaling {
        MaseScaling::Insample => insample,
        MaseScaling::ForecastWindow => y,
    };
    if series.len() <= s {
        return Err(Error::InvalidArgument(format!(
            "MASE scale needs more than s = {s} points, got {}",
            series.len()
        )));
    }
    let d: f64 = (s..series.len()).map(|j| (series[j] - series[j - s]).abs()).sum();
    let scale = d / (series.len() - s) as f64;
    if scale == 0.0 {
        return Err(Error::ConstantSeasonalSeries);
    }
    Ok(scale)
}

pub fn mase(y: &[f64], yhat: &[f64], insample: &[f64], s: usize, scaling: MaseScaling) -> Result<f64> {
    check_pair(y, yhat)?;
    let scale = mase_scale(y, insample, s, scaling)?;
    let num = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
    Ok(num / scale)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct M4Metrics {
    pub smape: f64,
    pub mase: f64,
    pub owa: f64,
}

/// SMAPE, MASE and OWA against the given Naive2 forecast.
pub fn m4_metrics(
    y: &[f64],
    yhat: &[f64],
    insample: &[f64],
    s: usize,
    naive2_forecast: &[f64],
    scaling: MaseScaling,
) -> Result<M4Metrics> {
    check_pair(y, naive2_forecast)?;
    let sm = smape(y, yhat)?;
    let ma = mase(y, yhat, insample, s, scaling)?;
    let sm_n = smape(y, naive2_forecast)?;
    let ma_n = mase(y, naive2_forecast, insample, s, scaling)?;
    if sm_n == 0.0 || ma_n == 0.0 {
        return Err(Error::InvalidArgument(
            "Naive2 reference is exact, OWA undefined".into(),
        ));
    }
    Ok(M4Metrics {
        smape: sm,
        mase: ma,
        owa: 0.5 * (sm / sm_n + ma / ma_n),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeasonalityTest {
    #[default]
    Acf90,
    Always,
    Never,
}

fn acf(x: &[f64], k: usize) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let den: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if den == 0.0 {
        return 0.0;
    }
    let num: f64 = (k..n).map(|t| (x[t] - mean) * (x[t - k] - mean)).sum();
    num / den
}

/// 90% autocorrelation seasonality test.
pub fn is_seasonal(insample: &[f64], s: usize) -> bool {
    let n = insample.len();
    if s <= 1 || n < 3 * s {
        return false;
    }
    let sq: f64 = (1..s).map(|k| acf(insample, k).powi(2)).sum();
    let limit = 1.645 * ((1.0 + 2.0 * sq) / n as f64).sqrt();
    acf(insample, s).abs() > limit
}

/// Seasonal indices (mean 1) by classical multiplicative decomposition, or
/// `None` when a centered average is not positive.
pub fn seasonal_indices(x: &[f64], s: usize) -> Option<Vec<f64>> {
    let n = x.len();
    if n < s + usize::from(s.is_multiple_of(2)) || s < 2 {
        return None;
    }
    let half = s / 2;
    let mut sums = vec![0.0; s];
    let mut counts = vec![0usize; s];
    for t in half..n - half {
        let cma = if s.is_multiple_of(2) {
            if t + half >= n {
                continue;
            }
            let inner: f64 = x[t + 1 - half..t + half].iter().sum();
            (0.5 * x[t - half] + inner + 0.5 * x[t + half]) / s as f64
        } else {
            x[t - half..=t + half].iter().sum::<f64>() / s as f64
        };
        if cma <= 0.0 {
            return None;
        }
        sums[t % s] += x[t] / cma;
        counts[t % s] += 1;
    }
    if counts.contains(&0) {
        return None;
    }
    let raw: Vec<f64> = sums.iter().zip(&counts).map(|(a, c)| a / *c as f64).collect();
    let mean = raw.iter().sum::<f64>() / s as f64;
    if mean <= 0.0 || raw.iter().any(|v| *v <= 0.0) {
        return None;
    }
    Some(raw.iter().map(|v| v / mean).collect())
}

pub fn naive2(insample: &[f64], h: usize, s: usize, test: SeasonalityTest) -> Result<Vec<f64>> {
    if s == 0 || h == 0 {
        return Err(Error::InvalidArgument("naive2 needs s >= 1 and H >= 1".into()));
    }
    let n = insample.len();
    if n < s.max(3) {
        return Err(Error::InvalidArgument(format!(
            "naive2 needs at least max(s, 3) = {} insample points, got {n}",
            s.max(3)
        )));
    }
    let seasonal = s > 1
        && match test {
            SeasonalityTest::Acf90 => is_seasonal(insample, s),
            SeasonalityTest::Always => true,
            SeasonalityTest::Never => false,
        };
    let last = insample[n - 1];
    if seasonal {
        if let Some(si) = seasonal_indices(insample, s) {
            let adjusted_last = last / si[(n - 1) % s];
            return Ok((0..h).map(|k| adjusted_last * si[(n + k) % s]).collect());
        }
    }
    Ok(vec![last; h])
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("accuracy on empty input".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::dim("accuracy", "label count mismatch"));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Running MSE/MAE, aggregate and per horizon step.
#[derive(Clone, Debug, Default)]
pub struct ForecastAccumulator {
    sq: Vec<f64>,
    abs: Vec<f64>,
    windows: usize,
}

impl ForecastAccumulator {
    pub fn push(&mut self, y: &[f64], yhat: &[f64]) -> Result<(f64, f64)> {
        let out = point_metrics(y, yhat)?;
        if self.sq.is_empty() {
            self.sq = vec![0.0; y.len()];
            self.abs = vec![0.0; y.len()];
        } else if self.sq.len() != y.len() {
            return Err(Error::dim("ForecastAccumulator", "horizon changed between windows"));
        }
        for (k, (a, b)) in y.iter().zip(yhat).enumerate() {
            self.sq[k] += (a - b) * (a - b);
            self.abs[k] += (a - b).abs();
        }
        self.windows += 1;
        Ok(out)
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn per_horizon(&self) -> Vec<(f64, f64)> {
        let w = self.windows.max(1) as f64;
        self.sq.iter().zip(&self.abs).map(|(s, a)| (s / w, a / w)).collect()
    }

    pub fn aggregate(&self) -> (f64, f64) {
        let ph = self.per_horizon();
        let h = ph.len().max(1) as f64;
        (
            ph.iter().map(|p| p.0).sum::<f64>() / h,
            ph.iter().map(|p| p.1).sum::<f64>() / h,
        )
    }
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MetricValues {
    Point {
        mse: f64,
        mae: f64,
        per_horizon_mse: Vec<f64>,
        per_horizon_mae: Vec<f64>,
    },
    M4 {
        smape: f64,
        mase: f64,
        owa: f64,
    },
    Accuracy {
        accuracy: f64,
    },
}

impl MetricValues {
    /// Lower-is-better scalar used for model selection.
    pub fn selection_score(&self) -> f64 {
        match self {
            MetricValues::Point { mse, .. } => *mse,
            MetricValues::M4 { owa, .. } => *owa,
            MetricValues::Accuracy { accuracy } => 1.0 - accuracy,
        }
    }

    pub fn from_accumulator(acc: &ForecastAccumulator) -> Self {
        let (mse, mae) = acc.aggregate();
        let ph = acc.per_horizon();
        MetricValues::Point {
            mse,
            mae,
            per_horizon_mse: ph.iter().map(|p| p.0).collect(),
            per_horizon_mae: ph.iter().map(|p| p.1).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub task: String,
    pub values: MetricValues,
    /// Same metrics for a reference forecaster, when one applies.
    pub baseline: Option<MetricValues>,
    pub samples: usize,
    pub config_digest: String,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))
    }
}

/// One row of the per-window CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub window: usize,
    pub channel: usize,
    pub origin: usize,
    pub mse: f64,
    pub mae: f64,
}

pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
