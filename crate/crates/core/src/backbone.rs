//! Toy GPT-style causal transformer with dual-scale insertion hooks, task
//! heads and losses.
//!
//! Blocks are pre-norm: `x + Attn(LN(x))`, then `x + MLP(LN(x))`. The same
//! blocks process the fine sequence and the coarse sequence as two separate
//! causal sequences.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dscagnn::{self, BlockOptions, CoarseProjector, DscaParams, DualScaleState, FineWeights};
use crate::error::{Error, Result};
use crate::graphspec::GraphSpec;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::tsembed::SequenceLayout;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    None,
    #[default]
    FreezeAttentionAndFfn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Depths at which a dual-scale block runs: 0 is before the first
    /// transformer block, `layers` after the last.
    pub insertion_positions: Vec<usize>,
    pub freeze_policy: FreezePolicy,
    pub max_seq_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 64,
            heads: 4,
            ff_mult: 4,
            insertion_positions: vec![0, 4],
            freeze_policy: FreezePolicy::default(),
            max_seq_len: 1024,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.ff_mult == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("ff_mult and max_seq_len must be positive".into()));
        }
        for w in self.insertion_positions.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(
                    "insertion positions must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&last) = self.insertion_positions.last() {
            if last > self.layers {
                return Err(Error::Config(format!(
                    "insertion position {last} beyond {} layers",
                    self.layers
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, trainable: bool, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let w = Tensor::new(
            vec![fan_in, fan_out],
            (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect(),
        )
        .expect("positive extents");
        Self {
            weight: store.add(format!("{name}.weight"), w, trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), trainable),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn new(store: &mut ParamStore, name: &str, m: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[m], 1.0), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[m]), true),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain)?;
        let b = tape.param(store, self.bias)?;
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormParams,
    pub fc: Linear,
    pub proj: Linear,
}

impl BlockParams {
    /// Attention and MLP linear maps, the tensors a freeze policy targets.
    pub fn frozen_candidates(&self) -> [ParamId; 12] {
        [
            self.q.weight, self.q.bias, self.k.weight, self.k.bias, self.v.weight, self.v.bias,
            self.o.weight, self.o.bias, self.fc.weight, self.fc.bias, self.proj.weight, self.proj.bias,
        ]
    }
}

/// Transformer stack plus one set of dual-scale parameters per insertion.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub blocks: Vec<BlockParams>,
    pub positions: ParamId,
    pub dsca: Vec<DscaParams>,
}

/// Per-forward switches.
#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// One entry per insertion position.
    pub fine_weights: Vec<FineWeights>,
    pub coarse_branch: bool,
    /// Skip every dual-scale block, keeping the layout.
    pub skip_dsca: bool,
}

impl ForwardOptions {
    pub fn cosine(insertions: usize) -> Self {
        Self {
            fine_weights: vec![FineWeights::Cosine; insertions],
            coarse_branch: true,
            skip_dsca: false,
        }
    }
}

/// What a forward pass did, for construction-count checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    pub dsca_blocks: usize,
    pub coarse_projections: usize,
}

impl Backbone {
    pub fn new<R: Rng>(config: BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let m = config.width;
        let ff = m * config.ff_mult;
        let frozen = config.freeze_policy == FreezePolicy::FreezeAttentionAndFfn;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("block{l}");
            blocks.push(BlockParams {
                ln1: LayerNormParams::new(store, &format!("{p}.ln1"), m),
                q: Linear::new(store, &format!("{p}.attn.q"), m, m, !frozen, rng),
                k: Linear::new(store, &format!("{p}.attn.k"), m, m, !frozen, rng),
                v: Linear::new(store, &format!("{p}.attn.v"), m, m, !frozen, rng),
                o: Linear::new(store, &format!("{p}.attn.o"), m, m, !frozen, rng),
                ln2: LayerNormParams::new(store, &format!("{p}.ln2"), m),
                fc: Linear::new(store, &format!("{p}.mlp.fc"), m, ff, !frozen, rng),
                proj: Linear::new(store, &format!("{p}.mlp.proj"), ff, m, !frozen, rng),
            });
        }
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let pos = Tensor::new(
            vec![config.max_seq_len, m],
            (0..config.max_seq_len * m).map(|_| normal.sample(rng)).collect(),
        )?;
        let positions = store.add("pos_embedding", pos, true);
        let bound = 1.0 / (m as f64).sqrt();
        let dsca = config
            .insertion_positions
            .iter()
            .map(|&d| DscaParams {
                w_fine: store.add(format!("dsca{d}.w_fine"), Tensor::uniform(&[m, m], bound, rng), true),
                w_coarse: store.add(format!("dsca{d}.w_coarse"), Tensor::uniform(&[m, m], bound, rng), true),
                w_cf: store.add(format!("dsca{d}.w_cf"), Tensor::uniform(&[m, m], bound, rng), true),
            })
            .collect();
        Ok(Self {
            config,
            blocks,
            positions,
            dsca,
        })
    }

    /// Parameters held fixed under the configured freeze policy.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        match self.config.freeze_policy {
            FreezePolicy::None => Vec::new(),
            FreezePolicy::FreezeAttentionAndFfn => self.blocks.iter().flat_map(|b| b.frozen_candidates()).collect(),
        }
    }

    /// Adds learned positional embeddings `0..rows` to `x`.
    pub fn add_positions(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let len = tape.value(x).rows();
        if len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        let table = tape.param(store, self.positions)?;
        let pos = tape.slice_rows(table, 0, len)?;
        tape.add(x, pos)
    }

    pub fn block_forward(&self, tape: &mut Tape, store: &ParamStore, block: &BlockParams, x: Var) -> Result<Var> {
        let m = self.config.width;
        let h = self.config.heads;
        let d = m / h;
        let a_in = block.ln1.apply(tape, store, x)?;
        let q = block.q.apply(tape, store, a_in)?;
        let k = block.k.apply(tape, store, a_in)?;
        let v = block.v.apply(tape, store, a_in)?;
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qh = tape.slice_cols(q, i * d, d)?;
            let kh = tape.slice_cols(k, i * d, d)?;
            let vh = tape.slice_cols(v, i * d, d)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
            let attn = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = if h == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let attn_out = block.o.apply(tape, store, cat)?;
        let x = tape.add(x, attn_out)?;
        let f_in = block.ln2.apply(tape, store, x)?;
        let hidden = block.fc.apply(tape, store, f_in)?;
        let hidden = tape.gelu(hidden)?;
        let f_out = block.proj.apply(tape, store, hidden)?;
        tape.add(x, f_out)
    }

    /// Runs the stack over an embedded fine sequence (positional embeddings are
    /// added here). The coarse sequence is created at the first insertion and
    /// then travels through the same blocks.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fine: Var,
        layout: &SequenceLayout,
        spec: &GraphSpec,
        projector: Option<&CoarseProjector>,
        opts: &ForwardOptions,
    ) -> Result<(DualScaleState, ForwardTrace)> {
        if !opts.skip_dsca && opts.fine_weights.len() != self.dsca.len() {
            return Err(Error::InvalidArgument(format!(
                "{} fine weight sources for {} insertions",
                opts.fine_weights.len(),
                self.dsca.len()
            )));
        }
        let mut trace = ForwardTrace::default();
        let fine = self.add_positions(tape, store, fine)?;
        let mut state = DualScaleState { fine, coarse: None };
        let mut next = 0;
        for depth in 0..=self.config.layers {
            if !opts.skip_dsca {
                while next < self.config.insertion_positions.len() && self.config.insertion_positions[next] == depth {
                    if opts.coarse_branch && state.coarse.is_none() {
                        let proj = projector.ok_or_else(|| {
                            Error::Contract("coarse branch enabled without a coarse projector".into())
                        })?;
                        let c = dscagnn::coarse_project(tape, store, state.fine, layout, spec, proj)?;
                        state.coarse = Some(self.add_positions(tape, store, c)?);
                        trace.coarse_projections += 1;
                    }
                    let block_opts = BlockOptions {
                        fine_weights: opts.fine_weights[next].clone(),
                        coarse_branch: opts.coarse_branch,
                    };
                    state = dscagnn::dsca_block(tape, store, state, spec, &self.dsca[next], &block_opts)?;
                    trace.dsca_blocks += 1;
                    next += 1;
                }
            }
            if depth < self.config.layers {
                let block = &self.blocks[depth];
                state.fine = self.block_forward(tape, store, block, state.fine)?;
                if let Some(c) = state.coarse {
                    state.coarse = Some(self.block_forward(tape, store, block, c)?);
                }
            }
        }
        Ok((state, trace))
    }
}

/// Flatten-then-affine head from the fine output to `outputs` values.
#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub linear: Linear,
    pub fine_len: usize,
    pub width: usize,
    pub outputs: usize,
}

impl Head {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fine_len: usize, width: usize, outputs: usize, rng: &mut R) -> Self {
        let fan_in = fine_len * width;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::uniform(&[fan_in, outputs], bound, rng);
        Self {
            linear: Linear {
                weight: store.add(format!("{name}.weight"), w, true),
                bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true),
            },
            fine_len,
            width,
            outputs,
        }
    }

    /// `1 × outputs`.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, fine_out: Var) -> Result<Var> {
        let v = tape.value(fine_out);
        if v.rows() != self.fine_len || v.cols() != self.width {
            return Err(Error::dim(
                "head",
                format!(
                    "head built for {}×{}, got {:?} (layout drift)",
                    self.fine_len,
                    self.width,
                    v.shape()
                ),
            ));
        }
        let flat = tape.reshape(fine_out, &[1, self.fine_len * self.width])?;
        self.linear.apply(tape, store, flat)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Smape,
    Ce,
}

pub enum LossTarget<'a> {
    Values(&'a Tensor),
    Class(usize),
}

pub const SMAPE_FLOOR: f64 = 1e-8;

pub fn compute_loss(tape: &mut Tape, pred: Var, target: LossTarget<'_>, kind: LossKind) -> Result<Var> {
    match (kind, target) {
        (LossKind::Mse, LossTarget::Values(t)) => tape.mse(pred, t),
        (LossKind::Smape, LossTarget::Values(t)) => tape.smape(pred, t, SMAPE_FLOOR),
        (LossKind::Ce, LossTarget::Class(c)) => tape.cross_entropy(pred, c),
        (k, _) => Err(Error::InvalidArgument(format!("loss {k:?} does not match target type"))),
    }
}
