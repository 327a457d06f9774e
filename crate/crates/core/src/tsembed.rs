//! Patching, window normalization, prompt tokenization and packing of the
//! mixed series/prompt token sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_FORECAST_PROMPT: &str = "Predict future sequences using previous data:";
pub const DEFAULT_PATCH_LEN: usize = 16;
pub const DEFAULT_PATCH_STRIDE: usize = 8;
/// Added to the population std so constant windows normalize to zero.
pub const NORM_EPS: f64 = 1e-5;
/// Byte-level tokenizer vocabulary.
pub const PROMPT_VOCAB: usize = 256;

/// Classification prompt naming the number of categories.
pub fn classification_prompt(classes: usize) -> String {
    format!("Predict category ({classes} in total) using previous data:")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    /// Population std plus [`NORM_EPS`].
    pub std: f64,
}

/// One channel of an input window.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesWindow {
    pub values: Vec<f64>,
    pub channel_id: usize,
    pub norm_stats: Option<NormStats>,
}

impl SeriesWindow {
    pub fn new(values: Vec<f64>, channel_id: usize) -> Self {
        Self {
            values,
            channel_id,
            norm_stats: None,
        }
    }
}

/// Per-window z-score. The returned window carries the stats needed to invert.
pub fn instance_normalize(w: &SeriesWindow) -> SeriesWindow {
    let n = w.values.len() as f64;
    let mean = w.values.iter().sum::<f64>() / n;
    let var = w.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt() + NORM_EPS;
    SeriesWindow {
        values: w.values.iter().map(|v| (v - mean) / std).collect(),
        channel_id: w.channel_id,
        norm_stats: Some(NormStats { mean, std }),
    }
}

pub fn denormalize(pred: &[f64], stats: &NormStats) -> Vec<f64> {
    pred.iter().map(|v| v * stats.std + stats.mean).collect()
}

/// Number of patches produced by `patchify` for a length-`t` window.
pub fn patch_count(t: usize, p: usize, s: usize) -> Result<usize> {
    if p == 0 || s == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be >= 1".into()));
    }
    if t < p {
        return Err(Error::InvalidArgument(format!(
            "window length {t} shorter than patch size {p}"
        )));
    }
    if !(t - p).is_multiple_of(s) {
        return Err(Error::InvalidArgument(format!(
            "window length {t} incompatible with patch {p} / stride {s}: (T - p) must be divisible by s; pad or trim the window"
        )));
    }
    Ok((t - p + s) / s)
}

/// Sliding-window patches; patch `i` covers `[i*s, i*s + p)`.
pub fn patchify(values: &[f64], p: usize, s: usize) -> Result<Vec<Vec<f64>>> {
    let n = patch_count(values.len(), p, s)?;
    Ok((0..n).map(|i| values[i * s..i * s + p].to_vec()).collect())
}

/// Splits `n` patches into `parts` ordered parts whose lengths differ by at
/// most one; the remainder goes to the last parts.
pub fn split_parts(n: usize, parts: usize) -> Result<Vec<usize>> {
    if parts == 0 || parts > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} patches into {parts} parts"
        )));
    }
    let base = n / parts;
    let rem = n % parts;
    Ok((0..parts)
        .map(|j| if j >= parts - rem { base + 1 } else { base })
        .collect())
}

/// One token per byte.
pub fn tokenize_prompt(text: &str) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("prompt must not be empty".into()));
    }
    Ok(text.bytes().map(usize::from).collect())
}

/// Role of one position in the packed fine-grained sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenRole {
    /// Patch `index` of series segment `part` (a forecast part, or the
    /// `part`-th demonstration example / query in classification).
    TsPatch { part: usize, index: usize },
    Prompt { copy: usize, index: usize },
    Label { example: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SequenceMode {
    Vca,
    FewShotForecast { part_lengths: Vec<usize> },
    /// `examples` labelled demonstrations (one per class) followed by the query.
    FewShotClass { examples: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Structure {
    /// `[part_1, prompt, ..., part_N, prompt]`; a single part is the vanilla layout.
    Parts(Vec<usize>),
    /// `[ex_1, prompt, label_1, ..., ex_l, prompt, label_l, query, prompt]`.
    Examples { examples: usize, patches: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    roles: Vec<TokenRole>,
    structure: Structure,
    prompt_len: usize,
}

impl SequenceLayout {
    pub fn build(mode: &SequenceMode, n: usize, m: usize) -> Result<Self> {
        match mode {
            SequenceMode::Vca => Self::vca(n, m),
            SequenceMode::FewShotForecast { part_lengths } => Self::few_shot_forecast(part_lengths, n, m),
            SequenceMode::FewShotClass { examples } => Self::few_shot_class(*examples, n, m),
        }
    }

    pub fn vca(n: usize, m: usize) -> Result<Self> {
        Self::few_shot_forecast(&[n], n, m)
    }

    pub fn few_shot_forecast(part_lengths: &[usize], n: usize, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("prompt length must be >= 1".into()));
        }
        if part_lengths.is_empty() || part_lengths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid part lengths {part_lengths:?}"
            )));
        }
        if part_lengths.iter().sum::<usize>() != n {
            return Err(Error::InvalidArgument(format!(
                "part lengths {part_lengths:?} do not sum to {n} patches"
            )));
        }
        let mut roles = Vec::with_capacity(n + m * part_lengths.len());
        for (j, &l) in part_lengths.iter().enumerate() {
            roles.extend((0..l).map(|s| TokenRole::TsPatch { part: j, index: s }));
            roles.extend((0..m).map(|t| TokenRole::Prompt { copy: j, index: t }));
        }
        Ok(Self {
            roles,
            structure: Structure::Parts(part_lengths.to_vec()),
            prompt_len: m,
        })
    }

    pub fn few_shot_class(examples: usize, n: usize, m: usize) -> Result<Self> {
        if examples == 0 {
            return Err(Error::InvalidArgument(
                "few-shot classification needs at least one example; use the vanilla layout".into(),
            ));
        }
        if n == 0 || m == 0 {
            return Err(Error::InvalidArgument("patch and prompt counts must be >= 1".into()));
        }
        let mut roles = Vec::new();
        for k in 0..=examples {
            roles.extend((0..n).map(|s| TokenRole::TsPatch { part: k, index: s }));
            roles.extend((0..m).map(|t| TokenRole::Prompt { copy: k, index: t }));
            if k < examples {
                roles.push(TokenRole::Label { example: k });
            }
        }
        Ok(Self {
            roles,
            structure: Structure::Examples { examples, patches: n },
            prompt_len: m,
        })
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn total_len(&self) -> usize {
        self.roles.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Lengths of the series segments in order (parts, or examples + query).
    pub fn part_lengths(&self) -> Vec<usize> {
        match &self.structure {
            Structure::Parts(p) => p.clone(),
            Structure::Examples { examples, patches } => vec![*patches; examples + 1],
        }
    }

    pub fn num_segments(&self) -> usize {
        match &self.structure {
            Structure::Parts(p) => p.len(),
            Structure::Examples { examples, .. } => examples + 1,
        }
    }

    pub fn num_labels(&self) -> usize {
        match &self.structure {
            Structure::Parts(_) => 0,
            Structure::Examples { examples, .. } => *examples,
        }
    }

    pub fn is_vanilla(&self) -> bool {
        matches!(&self.structure, Structure::Parts(p) if p.len() == 1)
    }

    pub fn mode_name(&self) -> String {
        match &self.structure {
            Structure::Parts(p) if p.len() == 1 => "vca".into(),
            Structure::Parts(p) => format!("fsca_forecast(N={})", p.len()),
            Structure::Examples { examples, .. } => format!("fsca_class(l={examples})"),
        }
    }

    /// Positions whose role satisfies `pred`, in order.
    pub fn positions(&self, pred: impl Fn(&TokenRole) -> bool) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| pred(r))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn segment_positions(&self, part: usize) -> Vec<usize> {
        self.positions(|r| matches!(r, TokenRole::TsPatch { part: p, .. } if *p == part))
    }

    pub fn prompt_positions(&self, copy: usize) -> Vec<usize> {
        self.positions(|r| matches!(r, TokenRole::Prompt { copy: c, .. } if *c == copy))
    }

    pub fn label_position(&self, example: usize) -> Option<usize> {
        self.roles
            .iter()
            .position(|r| matches!(r, TokenRole::Label { example: e } if *e == example))
    }
}

/// Linear patch embedding `p → M`.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedder {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PatchEmbedder {
    /// Embeds an `n×p` patch matrix into `n×M`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, patches: &[Vec<f64>]) -> Result<Var> {
        let x = tape.constant(Tensor::from_rows(patches)?)?;
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }
}

/// Packs segment embeddings, prompt embeddings and label embeddings into the
/// fine matrix in the layout's order.
pub fn pack_sequence(
    tape: &mut Tape,
    layout: &SequenceLayout,
    segments: &[Var],
    prompt: Var,
    labels: &[Var],
) -> Result<Var> {
    let lengths = layout.part_lengths();
    if segments.len() != lengths.len() {
        return Err(Error::InvalidArgument(format!(
            "layout has {} series segments, got {}",
            lengths.len(),
            segments.len()
        )));
    }
    for (seg, &l) in segments.iter().zip(&lengths) {
        if tape.value(*seg).rows() != l {
            return Err(Error::InvalidArgument(format!(
                "segment has {} rows, layout expects {l}",
                tape.value(*seg).rows()
            )));
        }
    }
    if tape.value(prompt).rows() != layout.prompt_len() {
        return Err(Error::InvalidArgument("prompt embedding length mismatch".into()));
    }
    if labels.len() != layout.num_labels() {
        return Err(Error::InvalidArgument(format!(
            "layout needs {} label embeddings, got {}",
            layout.num_labels(),
            labels.len()
        )));
    }
    let mut pieces = Vec::new();
    for (k, seg) in segments.iter().enumerate() {
        pieces.push(*seg);
        pieces.push(prompt);
        if k < labels.len() {
            pieces.push(labels[k]);
        }
    }
    tape.concat_rows(&pieces)
}
