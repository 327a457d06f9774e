//! Full forecaster / classifier: patch embedding, prompt and label tables,
//! coarse projector, backbone and head behind one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ForwardOptions, ForwardTrace, Head};
use crate::dscagnn::{CoarseProjector, FineWeights};
use crate::error::{Error, Result};
use crate::graphspec::{build_spec, GraphSpec};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::tsembed::{
    classification_prompt, instance_normalize, pack_sequence, patch_count, patchify, split_parts, tokenize_prompt,
    NormStats, PatchEmbedder, SequenceLayout, SeriesWindow, DEFAULT_FORECAST_PROMPT, PROMPT_VOCAB,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Forecast,
    Classify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyKind {
    /// Cosine weights from the current embeddings.
    #[default]
    Cosine,
    /// Uniform draws, renormalized per group, fixed for the whole run.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub task: TaskKind,
    /// Window length `T_in` (forecast) or series length (classification).
    pub input_len: usize,
    /// Forecast horizon `T'`.
    pub horizon: usize,
    pub classes: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    /// Prompt text; the task default when absent.
    pub prompt: Option<String>,
    /// Number of series parts for forecasting. 1 is the vanilla layout.
    pub parts: usize,
    /// Fixed demonstration examples for classification. 0 is the vanilla
    /// layout.
    pub class_examples: usize,
    pub pruned: bool,
    /// Per-window z-scoring of inputs.
    pub normalize: bool,
    pub adjacency: AdjacencyKind,
    /// Let gradients flow through the cosine edge weights.
    pub differentiable_weights: bool,
    pub coarse_branch: bool,
    /// `false` skips every dual-scale block but keeps the layout.
    pub dsca: bool,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Forecast,
            input_len: 96,
            horizon: 24,
            classes: 2,
            patch_len: 16,
            patch_stride: 8,
            prompt: None,
            parts: 2,
            class_examples: 0,
            pruned: true,
            normalize: true,
            adjacency: AdjacencyKind::Cosine,
            differentiable_weights: false,
            coarse_branch: true,
            dsca: true,
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn prompt_text(&self) -> String {
        match (&self.prompt, self.task) {
            (Some(p), _) => p.clone(),
            (None, TaskKind::Forecast) => DEFAULT_FORECAST_PROMPT.to_string(),
            (None, TaskKind::Classify) => classification_prompt(self.classes),
        }
    }

    pub fn num_patches(&self) -> Result<usize> {
        patch_count(self.input_len, self.patch_len, self.patch_stride)
    }

    /// Packed sequence layout implied by the configuration.
    pub fn layout(&self) -> Result<SequenceLayout> {
        let n = self.num_patches()?;
        let m = tokenize_prompt(&self.prompt_text())?.len();
        match self.task {
            TaskKind::Forecast => {
                let parts = split_parts(n, self.parts)?;
                SequenceLayout::few_shot_forecast(&parts, n, m)
            }
            TaskKind::Classify if self.class_examples == 0 => SequenceLayout::vca(n, m),
            TaskKind::Classify => SequenceLayout::few_shot_class(self.class_examples, n, m),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        match self.task {
            TaskKind::Forecast if self.horizon == 0 => return Err(Error::Config("horizon must be >= 1".into())),
            TaskKind::Classify if self.classes < 2 => return Err(Error::Config("need at least 2 classes".into())),
            _ => {}
        }
        let layout = self.layout()?;
        if layout.total_len() > self.backbone.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: layout.total_len(),
                max: self.backbone.max_seq_len,
            });
        }
        Ok(())
    }

    fn output_len(&self) -> usize {
        match self.task {
            TaskKind::Forecast => self.horizon,
            TaskKind::Classify => self.classes,
        }
    }
}

/// Prediction for one window before denormalization.
pub struct Prediction {
    /// `1 × horizon` (normalized units) or `1 × classes` logits.
    pub output: Var,
    pub stats: Option<NormStats>,
    pub trace: ForwardTrace,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub patch: PatchEmbedder,
    pub prompt_table: ParamId,
    pub label_table: Option<ParamId>,
    pub projector: Option<CoarseProjector>,
    pub head: Head,
    layout: SequenceLayout,
    spec: GraphSpec,
    prompt_tokens: Vec<usize>,
    random_weights: Option<Vec<Vec<f64>>>,
    example_values: Option<ParamId>,
    example_labels: Option<ParamId>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.layout()?;
        let spec = build_spec(&layout, config.pruned)?;
        let prompt_tokens = tokenize_prompt(&config.prompt_text())?;
        let m = config.backbone.width;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(config.backbone.clone(), &mut store, &mut rng)?;

        let p = config.patch_len;
        let pb = 1.0 / (p as f64).sqrt();
        let patch = PatchEmbedder {
            weight: store.add("patch.weight", Tensor::uniform(&[p, m], pb, &mut rng), true),
            bias: store.add("patch.bias", Tensor::zeros(&[m]), true),
        };
        let prompt_table = store.add(
            "prompt_embedding",
            Tensor::uniform(&[PROMPT_VOCAB, m], 3f64.sqrt(), &mut rng),
            true,
        );
        let label_table = (config.task == TaskKind::Classify && layout.num_labels() > 0).then(|| {
            store.add(
                "label_embedding",
                Tensor::uniform(&[config.classes, m], 3f64.sqrt(), &mut rng),
                true,
            )
        });
        let uses_coarse = config.dsca && config.coarse_branch && !backbone.dsca.is_empty();
        let projector = if uses_coarse {
            let max_part_len = layout.part_lengths().into_iter().max().unwrap_or(1);
            let fe_in = max_part_len * m;
            let fz_in = prompt_tokens.len() * m;
            Some(CoarseProjector {
                fe_weight: store.add(
                    "coarse.fe.weight",
                    Tensor::uniform(&[fe_in, m], 1.0 / (fe_in as f64).sqrt(), &mut rng),
                    true,
                ),
                fe_bias: store.add("coarse.fe.bias", Tensor::zeros(&[m]), true),
                fz_weight: store.add(
                    "coarse.fz.weight",
                    Tensor::uniform(&[fz_in, m], 1.0 / (fz_in as f64).sqrt(), &mut rng),
                    true,
                ),
                fz_bias: store.add("coarse.fz.bias", Tensor::zeros(&[m]), true),
                max_part_len,
                prompt_len: prompt_tokens.len(),
            })
        } else {
            None
        };
        let head = Head::new(&mut store, "head", layout.total_len(), m, config.output_len(), &mut rng);
        let random_weights = (config.adjacency == AdjacencyKind::Random).then(|| {
            (0..backbone.dsca.len())
                .map(|_| spec.random_edge_weights(&mut rng))
                .collect()
        });
        let (example_values, example_labels) = if config.task == TaskKind::Classify && config.class_examples > 0 {
            let l = config.class_examples;
            (
                Some(store.add("class_examples.values", Tensor::zeros(&[l, config.input_len]), false)),
                Some(store.add("class_examples.labels", Tensor::zeros(&[l]), false)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            store,
            backbone,
            patch,
            prompt_table,
            label_table,
            projector,
            head,
            layout,
            spec,
            prompt_tokens,
            random_weights,
            example_values,
            example_labels,
        })
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    /// Installs the fixed demonstration examples for few-shot classification.
    pub fn set_class_examples(&mut self, examples: &[(Vec<f64>, usize)]) -> Result<()> {
        let (Some(vid), Some(lid)) = (self.example_values, self.example_labels) else {
            return Err(Error::WrongMode {
                expected: "fsca_class",
                got: self.layout.mode_name(),
            });
        };
        if examples.len() != self.config.class_examples {
            return Err(Error::InvalidArgument(format!(
                "expected {} examples, got {}",
                self.config.class_examples,
                examples.len()
            )));
        }
        for (k, (values, label)) in examples.iter().enumerate() {
            if values.len() != self.config.input_len || *label >= self.config.classes {
                return Err(Error::InvalidArgument(format!("example {k} has wrong length or label")));
            }
            let row = &mut self.store.value_mut(vid).data_mut()[k * values.len()..(k + 1) * values.len()];
            row.copy_from_slice(values);
            self.store.value_mut(lid).data_mut()[k] = *label as f64;
        }
        Ok(())
    }

    pub fn class_examples(&self) -> Vec<(Vec<f64>, usize)> {
        match (self.example_values, self.example_labels) {
            (Some(v), Some(l)) => {
                let t = self.config.input_len;
                let vals = self.store.value(v).data();
                let labs = self.store.value(l).data();
                (0..labs.len())
                    .map(|k| (vals[k * t..(k + 1) * t].to_vec(), labs[k] as usize))
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    fn forward_options(&self) -> ForwardOptions {
        let n = self.backbone.dsca.len();
        let fine_weights = match (&self.random_weights, self.config.differentiable_weights) {
            (Some(w), _) => w.iter().cloned().map(FineWeights::Fixed).collect(),
            (None, true) => vec![FineWeights::CosineDifferentiable; n],
            (None, false) => vec![FineWeights::Cosine; n],
        };
        ForwardOptions {
            fine_weights,
            coarse_branch: self.config.coarse_branch,
            skip_dsca: !self.config.dsca,
        }
    }

    fn prepare(&self, values: &[f64]) -> Result<(Vec<f64>, Option<NormStats>)> {
        if values.len() != self.config.input_len {
            return Err(Error::InvalidArgument(format!(
                "input of length {} but model expects {}",
                values.len(),
                self.config.input_len
            )));
        }
        if self.config.normalize {
            let w = instance_normalize(&SeriesWindow::new(values.to_vec(), 0));
            Ok((w.values, w.norm_stats))
        } else {
            Ok((values.to_vec(), None))
        }
    }

    /// Forecast for one input window. Output is in normalized units when
    /// normalization is on; see [`Prediction::stats`].
    pub fn forward(&self, tape: &mut Tape, values: &[f64]) -> Result<Prediction> {
        self.forward_with_spec(tape, values, &self.spec)
    }

    /// As [`Model::forward`] with an explicit graph.
    pub fn forward_with_spec(&self, tape: &mut Tape, values: &[f64], spec: &GraphSpec) -> Result<Prediction> {
        if spec.fine_nodes() != self.layout.total_len() {
            return Err(Error::dim("forward", "graph does not match the model layout"));
        }
        let (x, stats) = self.prepare(values)?;
        let (p, s) = (self.config.patch_len, self.config.patch_stride);
        let prompt_table = tape.param(&self.store, self.prompt_table)?;
        let prompt = tape.gather_rows(prompt_table, &self.prompt_tokens)?;
        let (segments, labels) = match self.config.task {
            TaskKind::Forecast => {
                let emb = self.patch.embed(tape, &self.store, &patchify(&x, p, s)?)?;
                let mut segs = Vec::new();
                let mut start = 0;
                for len in self.layout.part_lengths() {
                    segs.push(tape.slice_rows(emb, start, len)?);
                    start += len;
                }
                (segs, Vec::new())
            }
            TaskKind::Classify => {
                let mut segs = Vec::new();
                let mut labels = Vec::new();
                let examples = self.class_examples();
                for (ex, label) in &examples {
                    let (ex, _) = self.prepare(ex)?;
                    segs.push(self.patch.embed(tape, &self.store, &patchify(&ex, p, s)?)?);
                    let table = tape.param(&self.store, self.label_table.expect("label table with examples"))?;
                    labels.push(tape.gather_rows(table, &[*label])?);
                }
                segs.push(self.patch.embed(tape, &self.store, &patchify(&x, p, s)?)?);
                (segs, labels)
            }
        };
        let fine = pack_sequence(tape, &self.layout, &segments, prompt, &labels)?;
        let (state, trace) = self.backbone.forward(
            tape,
            &self.store,
            fine,
            &self.layout,
            spec,
            self.projector.as_ref(),
            &self.forward_options(),
        )?;
        let output = self.head.apply(tape, &self.store, state.fine)?;
        Ok(Prediction { output, stats, trace })
    }

    /// Denormalized forecast values for one window.
    pub fn predict(&self, values: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pred = self.forward(&mut tape, values)?;
        let out = tape.value(pred.output).data().to_vec();
        Ok(match pred.stats {
            Some(s) => crate::tsembed::denormalize(&out, &s),
            None => out,
        })
    }

    /// Most likely class for one series.
    pub fn classify(&self, values: &[f64]) -> Result<usize> {
        let mut tape = Tape::new();
        let pred = self.forward(&mut tape, values)?;
        Ok(argmax(tape.value(pred.output).data()))
    }

    /// Parameters that must stay bitwise fixed during training.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        self.backbone.frozen_params()
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FreezePolicy;
    use crate::graphspec::{build_fsca_forecast_spec, build_vca_spec};

    fn micro(parts: usize) -> ModelConfig {
        ModelConfig {
            input_len: 40,
            horizon: 4,
            patch_len: 8,
            patch_stride: 8,
            prompt: Some("ab".into()),
            parts,
            backbone: BackboneConfig {
                layers: 1,
                width: 8,
                heads: 2,
                insertion_positions: vec![0, 1],
                freeze_policy: FreezePolicy::None,
                max_seq_len: 32,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn input() -> Vec<f64> {
        (0..40).map(|t| (t as f64 * 0.3).sin() + 0.1 * t as f64).collect()
    }

    #[test]
    fn forecast_shapes() {
        let model = Model::new(micro(2), 0).unwrap();
        assert_eq!(model.layout().total_len(), 5 + 2 * 2);
        assert_eq!(model.predict(&input()).unwrap().len(), 4);
        let mut tape = Tape::new();
        let pred = model.forward(&mut tape, &input()).unwrap();
        assert_eq!(pred.trace.dsca_blocks, 2);
        assert_eq!(pred.trace.coarse_projections, 1);
    }

    #[test]
    fn single_part_matches_vanilla_graph() {
        let model = Model::new(micro(1), 5).unwrap();
        let vca = build_vca_spec(model.layout()).unwrap();
        let fsca = build_fsca_forecast_spec(model.layout(), false).unwrap();
        assert_eq!(vca, fsca);
        let run = |spec: &GraphSpec| {
            let mut tape = Tape::new();
            let p = model.forward_with_spec(&mut tape, &input(), spec).unwrap();
            tape.value(p.output).clone()
        };
        assert_eq!(run(&vca), run(&fsca));
    }

    #[test]
    fn classification_with_examples() {
        let mut cfg = micro(1);
        cfg.task = TaskKind::Classify;
        cfg.classes = 3;
        cfg.class_examples = 2;
        cfg.prompt = None;
        cfg.backbone.max_seq_len = 256;
        let mut model = Model::new(cfg, 1).unwrap();
        model
            .set_class_examples(&[(input(), 0), (input().iter().map(|v| -v).collect(), 2)])
            .unwrap();
        assert_eq!(model.class_examples()[1].1, 2);
        let c = model.classify(&input()).unwrap();
        assert!(c < 3);
    }

    #[test]
    fn wrong_input_length() {
        let model = Model::new(micro(2), 0).unwrap();
        assert!(model.predict(&[1.0; 39]).is_err());
    }

    #[test]
    fn argmax_ties_take_first() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
