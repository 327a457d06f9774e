//! CSV ingestion, synthetic series, windowing, chronological splits and
//! few-shot subsetting.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `T × D` values, row-major by time.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    pub name: String,
    pub timestamps: Option<Vec<String>>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub frequency: Option<String>,
}

impl MultivariateSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.values.first().map_or(self.columns.len(), Vec::len)
    }

    pub fn channel(&self, d: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[d]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Empty cells are an error.
    #[default]
    Strict,
    /// Empty cells repeat the previous row's value.
    ForwardFill,
}

#[derive(Clone, Debug)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Column excluded from the values, e.g. `date`.
    pub timestamp_col: Option<usize>,
    pub missing: MissingPolicy,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            has_header: true,
            timestamp_col: Some(0),
            missing: MissingPolicy::Strict,
        }
    }
}

pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<MultivariateSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut series = read_csv(file, opts)?;
    series.name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(series)
}

/// Row numbers in errors are 1-based file lines.
pub fn read_csv<R: std::io::Read>(reader: R, opts: &CsvOptions) -> Result<MultivariateSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let mut columns = Vec::new();
    let mut line = 0usize;
    if opts.has_header {
        line += 1;
        match records.next() {
            Some(r) => {
                let r = r.map_err(|e| Error::Parse { row: line, message: e.to_string() })?;
                columns = r
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| Some(*i) != opts.timestamp_col)
                    .map(|(_, c)| c.trim().to_string())
                    .collect();
            }
            None => return Err(Error::Parse { row: 1, message: "empty file".into() }),
        }
    }
    let mut width: Option<usize> = opts.has_header.then_some(columns.len() + usize::from(opts.timestamp_col.is_some()));
    let mut stamps = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for rec in records {
        line += 1;
        let rec = rec.map_err(|e| Error::Parse { row: line, message: e.to_string() })?;
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Parse {
                row: line,
                message: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        let mut row = Vec::with_capacity(w);
        for (i, cell) in rec.iter().enumerate() {
            if Some(i) == opts.timestamp_col {
                stamps.push(cell.to_string());
                continue;
            }
            let cell = cell.trim();
            if cell.is_empty() {
                match (opts.missing, values.last()) {
                    (MissingPolicy::ForwardFill, Some(prev)) => row.push(prev[row.len()]),
                    _ => {
                        return Err(Error::Parse {
                            row: line,
                            message: format!("missing value in column {i}"),
                        })
                    }
                }
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                message: format!("non-numeric cell {cell:?} in column {i}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row: line, message: format!("non-finite value in column {i}") });
            }
            row.push(v);
        }
        if row.is_empty() {
            return Err(Error::Parse { row: line, message: "no feature columns".into() });
        }
        values.push(row);
    }
    if values.is_empty() {
        return Err(Error::Parse { row: line.max(1), message: "no data rows".into() });
    }
    if columns.is_empty() {
        columns = (0..values[0].len()).map(|i| format!("x{i}")).collect();
    }
    Ok(MultivariateSeries {
        name: String::new(),
        timestamps: opts.timestamp_col.map(|_| stamps),
        columns,
        values,
        frequency: None,
    })
}

/// Writes the same convention `load_csv` reads: header, optional timestamp
/// column first.
pub fn write_csv<W: std::io::Write>(series: &MultivariateSeries, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv write failed: {e}"));
    let mut header: Vec<String> = Vec::new();
    if series.timestamps.is_some() {
        header.push("date".into());
    }
    header.extend(series.columns.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (t, row) in series.values.iter().enumerate() {
        let mut rec: Vec<String> = Vec::with_capacity(row.len() + 1);
        if let Some(ts) = &series.timestamps {
            rec.push(ts[t].clone());
        }
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("csv flush failed: {e}")))?;
    Ok(())
}

/// Input window and the horizon that follows it, for one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub channel_id: usize,
    /// Time index of the first input value.
    pub origin: usize,
}

/// Chronological windows for every channel; per channel there are
/// `floor((T - t_in - horizon) / stride) + 1` windows. Channels are
/// interleaved by origin so the list is ordered by time.
pub fn make_windows(series: &MultivariateSeries, t_in: usize, horizon: usize, stride: usize) -> Result<Vec<WindowSample>> {
    if t_in == 0 || horizon == 0 || stride == 0 {
        return Err(Error::InvalidArgument("window length, horizon and stride must be >= 1".into()));
    }
    let t = series.len();
    if t < t_in + horizon {
        return Err(Error::InvalidArgument(format!(
            "series of length {t} too short for input {t_in} + horizon {horizon}"
        )));
    }
    let per_channel = (t - t_in - horizon) / stride + 1;
    let channels: Vec<Vec<f64>> = (0..series.dims()).map(|d| series.channel(d)).collect();
    let mut out = Vec::with_capacity(per_channel * channels.len());
    for k in 0..per_channel {
        let o = k * stride;
        for (d, ch) in channels.iter().enumerate() {
            out.push(WindowSample {
                input: ch[o..o + t_in].to_vec(),
                target: ch[o + t_in..o + t_in + horizon].to_vec(),
                channel_id: d,
                origin: o,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Splits by origin time. Boundaries are `floor(train·U)` and
/// `floor((train+val)·U)` over the `U` distinct origins, so a fractional
/// boundary origin lands in the later split.
pub fn chrono_split(samples: Vec<WindowSample>, fractions: (f64, f64, f64)) -> Result<Split<WindowSample>> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut origins: Vec<usize> = samples.iter().map(|s| s.origin).collect();
    origins.sort_unstable();
    origins.dedup();
    let u = origins.len() as f64;
    let cut1 = (a * u + 1e-9).floor() as usize;
    let cut2 = ((a + b) * u + 1e-9).floor() as usize;
    let idx = |o: usize| origins.binary_search(&o).expect("origin present");
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for s in samples {
        let i = idx(s.origin);
        if i < cut1 {
            split.train.push(s);
        } else if i < cut2 {
            split.val.push(s);
        } else {
            split.test.push(s);
        }
    }
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        if part.is_empty() {
            return Err(Error::InvalidArgument(format!("{name} split is empty")));
        }
    }
    Ok(split)
}

/// First `ceil(ratio · len)` samples.
pub fn few_shot_subset<T: Clone>(train: &[T], ratio: f64) -> Result<Vec<T>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("few-shot ratio {ratio} not in (0, 1]")));
    }
    let n = ((ratio * train.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    Ok(train[..n.min(train.len())].to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    SineMix,
    Ar2,
    TrendSeasonal,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine_mix" => Ok(Self::SineMix),
            "ar2" => Ok(Self::Ar2),
            "trend_seasonal" => Ok(Self::TrendSeasonal),
            _ => Err(Error::InvalidArgument(format!("unknown series kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub channels: usize,
    pub noise: f64,
    /// `(amplitude, period, phase)` for sine_mix; phases are drawn when empty.
    pub sines: Vec<(f64, f64, f64)>,
    pub ar_coeffs: (f64, f64),
    /// AR(2) starting values.
    pub ar_init: (f64, f64),
    pub trend: f64,
    pub period: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            channels: 1,
            noise: 0.1,
            sines: Vec::new(),
            ar_coeffs: (1.5, -0.9),
            ar_init: (1.0, 0.0),
            trend: 0.005,
            period: 24.0,
        }
    }
}

/// Deterministic synthetic series. sine_mix: `Σ aᵢ sin(2πt/Pᵢ + φᵢ) + σε`;
/// ar2: `x_t = c₁x_{t−1} + c₂x_{t−2} + σε`; trend_seasonal: linear trend times
/// a seasonal factor plus noise.
pub fn synth_generate(kind: SynthKind, t: usize, seed: u64, params: &SynthParams) -> Result<MultivariateSeries> {
    if t == 0 || params.channels == 0 {
        return Err(Error::InvalidArgument("series length and channels must be >= 1".into()));
    }
    if params.noise < 0.0 {
        return Err(Error::InvalidArgument("noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let tau = std::f64::consts::TAU;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(params.channels);
    for _ in 0..params.channels {
        let col: Vec<f64> = match kind {
            SynthKind::SineMix => {
                let sines: Vec<(f64, f64, f64)> = if params.sines.is_empty() {
                    vec![
                        (1.0, 24.0, rng.gen::<f64>() * tau),
                        (0.5, 12.0, rng.gen::<f64>() * tau),
                        (0.3, 7.0, rng.gen::<f64>() * tau),
                    ]
                } else {
                    params.sines.clone()
                };
                (0..t)
                    .map(|i| {
                        let s: f64 = sines.iter().map(|(a, p, ph)| a * (tau * i as f64 / p + ph).sin()).sum();
                        s + params.noise * normal.sample(&mut rng)
                    })
                    .collect()
            }
            SynthKind::Ar2 => {
                let (c1, c2) = params.ar_coeffs;
                let mut x = Vec::with_capacity(t);
                let (mut p2, mut p1) = (params.ar_init.1, params.ar_init.0);
                for _ in 0..t {
                    let v = c1 * p1 + c2 * p2 + params.noise * normal.sample(&mut rng);
                    x.push(v);
                    p2 = p1;
                    p1 = v;
                }
                x
            }
            SynthKind::TrendSeasonal => {
                let phase = rng.gen::<f64>() * tau;
                (0..t)
                    .map(|i| {
                        let level = 10.0 + params.trend * i as f64;
                        let season = 1.0 + 0.3 * (tau * i as f64 / params.period + phase).sin();
                        level * season + params.noise * normal.sample(&mut rng)
                    })
                    .collect()
            }
        };
        cols.push(col);
    }
    let values = (0..t).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    let name = match kind {
        SynthKind::SineMix => "sine_mix",
        SynthKind::Ar2 => "ar2",
        SynthKind::TrendSeasonal => "trend_seasonal",
    };
    Ok(MultivariateSeries {
        name: name.into(),
        timestamps: Some((0..t).map(|i| i.to_string()).collect()),
        columns: (0..params.channels).map(|d| format!("x{d}")).collect(),
        values,
        frequency: None,
    })
}

/// Labelled series for classification.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSeries {
    pub values: Vec<f64>,
    pub label: usize,
}

/// Class `k` is a noisy sine whose period grows with `k`, with random phase
/// and amplitude jitter.
pub fn synth_classification(classes: usize, per_class: usize, len: usize, noise: f64, seed: u64) -> Result<Vec<LabelledSeries>> {
    if classes < 2 || per_class == 0 || len == 0 {
        return Err(Error::InvalidArgument("need >= 2 classes, >= 1 sample per class and len >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let tau = std::f64::consts::TAU;
    let mut out = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for k in 0..classes {
            let period = 6.0 * (k + 1) as f64;
            let phase = rng.gen::<f64>() * tau;
            let amp = 1.0 + 0.2 * (rng.gen::<f64>() - 0.5);
            let values = (0..len)
                .map(|i| amp * (tau * i as f64 / period + phase).sin() + noise * normal.sample(&mut rng))
                .collect();
            out.push(LabelledSeries { values, label: k });
        }
    }
    Ok(out)
}

/// First sample of each of the first `l` classes, in class order.
pub fn class_exemplars(train: &[LabelledSeries], l: usize) -> Result<Vec<(Vec<f64>, usize)>> {
    (0..l)
        .map(|k| {
            train
                .iter()
                .find(|s| s.label == k)
                .map(|s| (s.values.clone(), k))
                .ok_or_else(|| Error::InvalidArgument(format!("no training sample of class {k}")))
        })
        .collect()
}

/// Zero-shot evaluation set: windows of `target` built with the geometry the
/// source model was trained with. Normalization stays per window.
pub fn zero_shot_windows(target: &MultivariateSeries, t_in: usize, horizon: usize, stride: usize, fractions: (f64, f64, f64)) -> Result<Vec<WindowSample>> {
    let windows = make_windows(target, t_in, horizon, stride)?;
    Ok(chrono_split(windows, fractions)?.test)
}
