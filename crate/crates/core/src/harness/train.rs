//! Training loop with early stopping, checkpoint/resume and evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{compute_loss, LossKind, LossTarget};
use crate::data::{
    chrono_split, class_exemplars, few_shot_subset, load_csv, make_windows, synth_classification, synth_generate,
    CsvOptions, LabelledSeries, MultivariateSeries, Split, SynthParams, WindowSample,
};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{self, hex};
use crate::harness::config::{DataConfig, DataSource, EvalMetric, RunConfig, TrainConfig};
use crate::harness::optim::{lr_schedule, optimizer_step, OptimConfig, OptimizerState};
use crate::metrics::{
    self, accuracy, m4_metrics, naive2, ForecastAccumulator, MetricReport, MetricValues, SeasonalityTest, WindowRow,
    REPORT_SCHEMA_VERSION,
};
use crate::model::{Model, TaskKind};
use crate::numerics::{ParamId, Tape, Tensor};
use crate::tsembed::NormStats;

#[derive(Clone, Debug)]
pub enum Dataset {
    Forecast(Split<WindowSample>),
    Classify(Split<LabelledSeries>),
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        match self {
            Dataset::Forecast(s) => s.train.len(),
            Dataset::Classify(s) => s.train.len(),
        }
    }
}

pub fn load_series(data: &DataConfig) -> Result<MultivariateSeries> {
    let series = match data.source {
        DataSource::Synth => {
            let params = SynthParams {
                channels: data.channels,
                noise: data.noise,
                ..SynthParams::default()
            };
            synth_generate(data.synth_kind, data.length, data.synth_seed, &params)?
        }
        DataSource::Csv => {
            let path = data
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("data.path is required for csv sources".into()))?;
            let opts = CsvOptions {
                has_header: data.has_header,
                timestamp_col: data.timestamp_col,
                missing: data.missing,
            };
            load_csv(path, &opts)?
        }
        DataSource::SynthClass => {
            return Err(Error::Config("classification data has no continuous series".into()));
        }
    };
    if data.channel_subset.is_empty() {
        return Ok(series);
    }
    if let Some(&bad) = data.channel_subset.iter().find(|&&c| c >= series.dims()) {
        return Err(Error::Config(format!("channel {bad} out of range")));
    }
    Ok(MultivariateSeries {
        columns: data.channel_subset.iter().map(|&c| series.columns[c].clone()).collect(),
        values: series
            .values
            .iter()
            .map(|r| data.channel_subset.iter().map(|&c| r[c]).collect())
            .collect(),
        ..series
    })
}

fn split_by_index<T>(items: Vec<T>, fractions: (f64, f64, f64)) -> Result<Split<T>> {
    let n = items.len() as f64;
    let cut1 = (fractions.0 * n + 1e-9).floor() as usize;
    let cut2 = ((fractions.0 + fractions.1) * n + 1e-9).floor() as usize;
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, it) in items.into_iter().enumerate() {
        if i < cut1 {
            split.train.push(it);
        } else if i < cut2 {
            split.val.push(it);
        } else {
            split.test.push(it);
        }
    }
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::InvalidArgument("a classification split is empty".into()));
    }
    Ok(split)
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (m, d) = (&cfg.model, &cfg.data);
    match m.task {
        TaskKind::Forecast => {
            let series = load_series(d)?;
            let windows = make_windows(&series, m.input_len, m.horizon, d.window_stride)?;
            let mut split = chrono_split(windows, d.split)?;
            split.train = few_shot_subset(&split.train, d.few_shot_ratio)?;
            Ok(Dataset::Forecast(split))
        }
        TaskKind::Classify => {
            if d.source != DataSource::SynthClass {
                return Err(Error::Config("classification needs data.source = \"synth_class\"".into()));
            }
            let items = synth_classification(m.classes, d.per_class, m.input_len, d.noise, d.synth_seed)?;
            let mut split = split_by_index(items, d.split)?;
            split.train = few_shot_subset(&split.train, d.few_shot_ratio)?;
            Ok(Dataset::Classify(split))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!("{}, {:.8e}, {:.8e}, {:.6e}", self.epoch, self.train_loss, self.val_metric, self.lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub lr0: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub history: Vec<EpochLog>,
    pub test: MetricReport,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))
    }
}

/// Everything a run produces.
pub struct RunOutcome {
    pub model: Model,
    pub report: RunReport,
    pub window_csv: String,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Writes `checkpoint.bin`, `train.log`, `report.json`, `windows.csv`.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/checkpoint.bin` when present.
    pub resume: bool,
    /// Stop after this many epochs in this invocation (for resume tests).
    pub epoch_limit: Option<usize>,
    /// Echo log lines to stderr.
    pub verbose: bool,
}

struct TrainState {
    next_epoch: usize,
    opt: OptimizerState,
    best_val: f64,
    best_epoch: usize,
    bad_epochs: usize,
    best_params: Vec<Tensor>,
    history: Vec<EpochLog>,
}

fn params_snapshot(model: &Model) -> Vec<Tensor> {
    model.store.iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore_params(model: &mut Model, snap: &[Tensor]) {
    for (i, t) in snap.iter().enumerate() {
        *model.store.value_mut(ParamId(i)) = t.clone();
    }
}

fn state_tensors(model: &Model, st: &TrainState) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (id, p) in model.store.iter() {
        out.push((format!("param/{}", p.name), p.value.clone()));
        out.push((format!("adam_m/{}", p.name), st.opt.m[id.0].clone()));
        out.push((format!("adam_v/{}", p.name), st.opt.v[id.0].clone()));
        out.push((format!("best/{}", p.name), st.best_params[id.0].clone()));
    }
    let scalars = vec![
        st.next_epoch as f64,
        st.opt.step as f64,
        st.best_val,
        st.best_epoch as f64,
        st.bad_epochs as f64,
    ];
    out.push(("state/scalars".into(), Tensor::new(vec![scalars.len()], scalars).expect("len")));
    if !st.history.is_empty() {
        let rows: Vec<Vec<f64>> = st
            .history
            .iter()
            .map(|h| vec![h.epoch as f64, h.train_loss, h.val_metric, h.lr])
            .collect();
        out.push(("state/history".into(), Tensor::from_rows(&rows).expect("rows")));
    }
    out
}

fn restore_state(model: &mut Model, tensors: Vec<(String, Tensor)>) -> Result<TrainState> {
    let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut take = |k: String| map.remove(&k).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{k}`")));
    let n = model.store.len();
    let mut opt = OptimizerState::new(&model.store);
    let mut best_params = Vec::with_capacity(n);
    for i in 0..n {
        let name = model.store.get(ParamId(i)).name.clone();
        let v = take(format!("param/{name}"))?;
        if v.shape() != model.store.value(ParamId(i)).shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
        }
        *model.store.value_mut(ParamId(i)) = v;
        opt.m[i] = take(format!("adam_m/{name}"))?;
        opt.v[i] = take(format!("adam_v/{name}"))?;
        best_params.push(take(format!("best/{name}"))?);
    }
    let s = take("state/scalars".into())?;
    let s = s.data();
    if s.len() != 5 {
        return Err(Error::Checkpoint("bad state scalars".into()));
    }
    opt.step = s[1] as u64;
    let history = match take("state/history".into()) {
        Ok(h) => (0..h.rows())
            .map(|r| {
                let row = h.row(r);
                EpochLog {
                    epoch: row[0] as usize,
                    train_loss: row[1],
                    val_metric: row[2],
                    lr: row[3],
                }
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    Ok(TrainState {
        next_epoch: s[0] as usize,
        opt,
        best_val: s[2],
        best_epoch: s[3] as usize,
        bad_epochs: s[4] as usize,
        best_params,
        history,
    })
}

/// Loads the model parameters saved by a run (the best, restored weights).
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let (digest, tensors) = checkpoint::load(path)?;
    if digest != cfg.model_digest() {
        return Err(Error::Checkpoint(
            "checkpoint was written for a different model configuration".into(),
        ));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    for i in 0..model.store.len() {
        let name = model.store.get(ParamId(i)).name.clone();
        let t = map
            .remove(&format!("param/{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `param/{name}`")))?;
        if t.shape() != model.store.value(ParamId(i)).shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
        }
        *model.store.value_mut(ParamId(i)) = t;
    }
    Ok(model)
}

fn normalized_target(target: &[f64], stats: Option<NormStats>) -> Result<Tensor> {
    let vals: Vec<f64> = match stats {
        Some(s) => target.iter().map(|v| (v - s.mean) / s.std).collect(),
        None => target.to_vec(),
    };
    Tensor::new(vec![1, vals.len()], vals)
}

/// Loss and parameter gradients for one sample.
fn sample_grads(model: &Model, loss_kind: LossKind, sample: SampleRef<'_>) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let mut tape = Tape::new();
    let loss = match sample {
        SampleRef::Window(w) => {
            let pred = model.forward(&mut tape, &w.input)?;
            let target = normalized_target(&w.target, pred.stats)?;
            compute_loss(&mut tape, pred.output, LossTarget::Values(&target), loss_kind)?
        }
        SampleRef::Labelled(s) => {
            let pred = model.forward(&mut tape, &s.values)?;
            compute_loss(&mut tape, pred.output, LossTarget::Class(s.label), loss_kind)?
        }
    };
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, grads.params().map(|(id, g)| (id, g.clone())).collect()))
}

#[derive(Clone, Copy)]
enum SampleRef<'a> {
    Window(&'a WindowSample),
    Labelled(&'a LabelledSeries),
}

/// Mean loss and mean gradient over a batch. Gradients are summed in sample
/// order so results are bitwise reproducible.
pub fn batch_gradients(model: &Model, loss_kind: LossKind, data: &Dataset, batch: &[usize]) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let mut sum: Vec<Option<Tensor>> = vec![None; model.store.len()];
    let mut loss = 0.0;
    for &i in batch {
        let sample = match data {
            Dataset::Forecast(s) => SampleRef::Window(&s.train[i]),
            Dataset::Classify(s) => SampleRef::Labelled(&s.train[i]),
        };
        let (l, grads) = sample_grads(model, loss_kind, sample)?;
        loss += l;
        for (id, g) in grads {
            match &mut sum[id.0] {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let grads = sum
        .into_iter()
        .enumerate()
        .filter_map(|(i, g)| {
            g.map(|mut g| {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
                (ParamId(i), g)
            })
        })
        .collect();
    Ok((loss * scale, grads))
}

/// Metrics over forecast windows, plus per-window rows and the reference
/// forecaster's metrics (last value for point metrics, Naive2 for M4).
pub fn evaluate_forecast(model: &Model, windows: &[WindowSample], train: &TrainConfig) -> Result<(MetricValues, MetricValues, Vec<WindowRow>)> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("no windows to evaluate".into()));
    }
    let mut acc = ForecastAccumulator::default();
    let mut base = ForecastAccumulator::default();
    let mut rows = Vec::with_capacity(windows.len());
    let (mut sm, mut ma, mut sm_n, mut ma_n) = (0.0, 0.0, 0.0, 0.0);
    for (i, w) in windows.iter().enumerate() {
        let pred = model.predict(&w.input)?;
        let last = *w.input.last().expect("non-empty input");
        let naive = vec![last; w.target.len()];
        let (mse, mae) = acc.push(&w.target, &pred)?;
        base.push(&w.target, &naive)?;
        if train.metric == EvalMetric::M4 {
            let s = train.seasonality;
            let n2 = naive2(&w.input, w.target.len(), s, SeasonalityTest::Acf90)?;
            let r = m4_metrics(&w.target, &pred, &w.input, s, &n2, train.mase_scaling);
            // an exact Naive2 window makes OWA undefined; its SMAPE/MASE still count
            let (a, b) = match r {
                Ok(r) => (r.smape, r.mase),
                Err(Error::InvalidArgument(_)) => (
                    metrics::smape(&w.target, &pred)?,
                    metrics::mase(&w.target, &pred, &w.input, s, train.mase_scaling)?,
                ),
                Err(e) => return Err(e),
            };
            sm += a;
            ma += b;
            sm_n += metrics::smape(&w.target, &n2)?;
            ma_n += metrics::mase(&w.target, &n2, &w.input, s, train.mase_scaling)?;
        }
        rows.push(WindowRow {
            window: i,
            channel: w.channel_id,
            origin: w.origin,
            mse,
            mae,
        });
    }
    let n = windows.len() as f64;
    let (values, baseline) = match train.metric {
        EvalMetric::Point => (MetricValues::from_accumulator(&acc), MetricValues::from_accumulator(&base)),
        EvalMetric::M4 => {
            let owa = if sm_n > 0.0 && ma_n > 0.0 {
                0.5 * (sm / sm_n + ma / ma_n)
            } else {
                return Err(Error::InvalidArgument("Naive2 is exact on every window; OWA undefined".into()));
            };
            (
                MetricValues::M4 {
                    smape: sm / n,
                    mase: ma / n,
                    owa,
                },
                MetricValues::M4 {
                    smape: sm_n / n,
                    mase: ma_n / n,
                    owa: 1.0,
                },
            )
        }
    };
    Ok((values, baseline, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
}

/// Accuracy, majority-class baseline accuracy, per-sample rows.
pub fn evaluate_classify(model: &Model, items: &[LabelledSeries], train_items: &[LabelledSeries]) -> Result<(MetricValues, MetricValues, Vec<ClassRow>)> {
    let mut pred = Vec::with_capacity(items.len());
    for s in items {
        pred.push(model.classify(&s.values)?);
    }
    let truth: Vec<usize> = items.iter().map(|s| s.label).collect();
    let mut counts = vec![0usize; model.config.classes];
    for s in train_items {
        counts[s.label] += 1;
    }
    let majority = crate::model::argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let rows = items
        .iter()
        .zip(&pred)
        .enumerate()
        .map(|(index, (s, &p))| ClassRow {
            index,
            label: s.label,
            predicted: p,
        })
        .collect();
    Ok((
        MetricValues::Accuracy {
            accuracy: accuracy(&pred, &truth)?,
        },
        MetricValues::Accuracy {
            accuracy: accuracy(&vec![majority; truth.len()], &truth)?,
        },
        rows,
    ))
}

fn validation_score(model: &Model, data: &Dataset, train: &TrainConfig) -> Result<f64> {
    Ok(match data {
        Dataset::Forecast(s) => evaluate_forecast(model, &s.val, train)?.0.selection_score(),
        Dataset::Classify(s) => evaluate_classify(model, &s.val, &s.train)?.0.selection_score(),
    })
}

/// Evaluates on the test split and assembles the report and per-row CSV.
pub fn test_report(model: &Model, data: &Dataset, cfg: &RunConfig) -> Result<(MetricReport, String)> {
    let (values, baseline, csv, samples, task) = match data {
        Dataset::Forecast(s) => {
            let (v, b, rows) = evaluate_forecast(model, &s.test, &cfg.train)?;
            (v, b, metrics::rows_to_csv(&rows)?, s.test.len(), "forecast")
        }
        Dataset::Classify(s) => {
            let (v, b, rows) = evaluate_classify(model, &s.test, &s.train)?;
            (v, b, metrics::rows_to_csv(&rows)?, s.test.len(), "classify")
        }
    };
    Ok((
        MetricReport {
            schema_version: REPORT_SCHEMA_VERSION,
            task: task.into(),
            values,
            baseline: Some(baseline),
            samples,
            config_digest: hex(&cfg.digest()),
        },
        csv,
    ))
}

fn write_logs(dir: &Path, history: &[EpochLog]) -> Result<()> {
    let mut text = String::from("# epoch, train_loss, val_metric, lr\n");
    for h in history {
        let _ = writeln!(text, "{}", h.line());
    }
    checkpoint::atomic_write(&dir.join("train.log"), text.as_bytes())
}

/// Trains, early-stops on the validation metric, restores the best weights and
/// evaluates on the test split.
pub fn run_training(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = build_dataset(cfg)?;
    if data.train_len() == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    if let Dataset::Classify(s) = &data {
        if cfg.model.class_examples > 0 {
            model.set_class_examples(&class_exemplars(&s.train, cfg.model.class_examples)?)?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let ckpt_path = opts.out_dir.as_ref().map(|d| d.join("checkpoint.bin"));
    let digest = cfg.model_digest();

    let mut st = match (&ckpt_path, opts.resume) {
        (Some(p), true) if p.exists() => {
            let (d, tensors) = checkpoint::load(p)?;
            if d != digest {
                return Err(Error::Checkpoint("checkpoint belongs to a different configuration".into()));
            }
            restore_state(&mut model, tensors)?
        }
        _ => TrainState {
            next_epoch: 0,
            opt: OptimizerState::new(&model.store),
            best_val: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
            best_params: params_snapshot(&model),
            history: Vec::new(),
        },
    };

    let ocfg = OptimConfig {
        kind: cfg.train.optimizer,
        betas: cfg.train.betas,
        eps: cfg.train.eps,
    };
    let t = &cfg.train;
    let mut ran = 0;
    let stopped = |st: &TrainState| st.bad_epochs >= t.patience || st.next_epoch >= t.max_epochs;
    while !stopped(&st) {
        if opts.epoch_limit.is_some_and(|l| ran >= l) {
            break;
        }
        let epoch = st.next_epoch;
        let lr = lr_schedule(epoch, t.lr0, t.t_max, t.eta_min);
        let mut order: Vec<usize> = (0..data.train_len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(t.batch_size) {
            let (loss, grads) = batch_gradients(&model, t.loss, &data, batch)?;
            optimizer_step(&mut model.store, &grads, &ocfg, lr, &mut st.opt)?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / data.train_len() as f64;
        let val = validation_score(&model, &data, t)?;
        let log = EpochLog {
            epoch,
            train_loss,
            val_metric: val,
            lr,
        };
        if opts.verbose {
            eprintln!("{}", log.line());
        }
        st.history.push(log);
        if val < st.best_val {
            st.best_val = val;
            st.best_epoch = epoch;
            st.bad_epochs = 0;
            st.best_params = params_snapshot(&model);
        } else {
            st.bad_epochs += 1;
        }
        st.next_epoch += 1;
        ran += 1;
        if let (Some(dir), Some(p)) = (&opts.out_dir, &ckpt_path) {
            checkpoint::save(p, &digest, &state_tensors(&model, &st))?;
            write_logs(dir, &st.history)?;
        }
    }

    restore_params(&mut model, &st.best_params);
    let (test, window_csv) = test_report(&model, &data, cfg)?;
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        lr0: t.lr0,
        epochs_run: st.history.len(),
        best_epoch: st.best_epoch,
        best_val_metric: st.best_val,
        history: st.history.clone(),
        test,
    };
    if let Some(dir) = &opts.out_dir {
        checkpoint::save(&dir.join("model.bin"), &digest, &model_tensors(&model))?;
        checkpoint::atomic_write(&dir.join("report.json"), report.to_json()?.as_bytes())?;
        checkpoint::atomic_write(&dir.join("windows.csv"), window_csv.as_bytes())?;
    }
    Ok(RunOutcome {
        model,
        report,
        window_csv,
    })
}

/// Parameter tensors only, under `param/<name>`.
pub fn model_tensors(model: &Model) -> Vec<(String, Tensor)> {
    model
        .store
        .iter()
        .map(|(_, p)| (format!("param/{}", p.name), p.value.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_split() {
        let s = split_by_index((0..10).collect::<Vec<_>>(), (0.7, 0.1, 0.2)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
    }
}
