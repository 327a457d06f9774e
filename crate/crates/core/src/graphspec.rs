//! Compiles a [`SequenceLayout`] into the fine and coarse directed graphs,
//! their group-normalized weights, and the fine→coarse assignment matrix.
//!
//! Adjacency convention: `A[target][source]` holds the weight of
//! `source → target`, so the row-sum degree of `A + I` aggregates each node's
//! in-neighbourhood.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{self as gops, GroupedEdge};
use crate::numerics::Tensor;
use crate::tsembed::{SequenceLayout, Structure, TokenRole};

/// Which logical relation an edge (or group) encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    /// Series → prompt: the prompt reads from the series before it.
    First,
    /// Prompt → next part (or label): the answer to the prompt.
    Second,
}

impl EdgeKind {
    fn code(self) -> usize {
        match self {
            EdgeKind::First => 0,
            EdgeKind::Second => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeGroup {
    pub kind: EdgeKind,
    /// `false` for fixed-weight (label) edges that bypass cosine similarity.
    pub cosine: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CoarseRole {
    TsPart(usize),
    Prompt(usize),
    Label(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CoarseEdge {
    pub source: usize,
    pub target: usize,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec {
    fine_nodes: usize,
    fine_edges: Vec<GroupedEdge>,
    groups: Vec<EdgeGroup>,
    coarse_roles: Vec<CoarseRole>,
    coarse_edges: Vec<CoarseEdge>,
    gamma: Tensor,
}

/// Dense adjacency, `A[target][source]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedAdjacency {
    pub matrix: Tensor,
}

impl GraphSpec {
    pub fn fine_nodes(&self) -> usize {
        self.fine_nodes
    }

    pub fn coarse_nodes(&self) -> usize {
        self.coarse_roles.len()
    }

    pub fn fine_edges(&self) -> &[GroupedEdge] {
        &self.fine_edges
    }

    pub fn groups(&self) -> &[EdgeGroup] {
        &self.groups
    }

    pub fn group_cosine(&self) -> Vec<bool> {
        self.groups.iter().map(|g| g.cosine).collect()
    }

    pub fn coarse_roles(&self) -> &[CoarseRole] {
        &self.coarse_roles
    }

    pub fn coarse_edges(&self) -> &[CoarseEdge] {
        &self.coarse_edges
    }

    /// `L_c × L_f` 0/1 assignment matrix.
    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn edge_kind(&self, e: &GroupedEdge) -> EdgeKind {
        self.groups[e.group].kind
    }

    /// Coarse adjacency: weight 1 on every listed edge.
    pub fn coarse_adjacency(&self) -> WeightedAdjacency {
        let n = self.coarse_nodes();
        let mut a = Tensor::zeros(&[n, n]);
        for e in &self.coarse_edges {
            a.set(e.target, e.source, 1.0);
        }
        WeightedAdjacency { matrix: a }
    }

    /// Fine adjacency from explicit per-edge weights.
    pub fn fine_adjacency(&self, weights: &[f64]) -> WeightedAdjacency {
        WeightedAdjacency {
            matrix: gops::dense_adjacency(self.fine_nodes, &self.fine_edges, weights),
        }
    }

    /// Fixed `uniform(0, 1)` draws re-normalized per group; fixed-weight groups
    /// keep weight 1.
    pub fn random_edge_weights<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let raw: Vec<f64> = self
            .fine_edges
            .iter()
            .map(|e| {
                if self.groups[e.group].cosine {
                    // (0, 1]: never exactly zero so every group normalizes
                    1.0 - rng.gen::<f64>()
                } else {
                    1.0
                }
            })
            .collect();
        gops::normalize_groups(&raw, &self.fine_edges, self.groups.len())
    }
}

struct Builder {
    edges: Vec<GroupedEdge>,
    groups: Vec<EdgeGroup>,
}

impl Builder {
    fn new() -> Self {
        Self {
            edges: Vec::new(),
            groups: Vec::new(),
        }
    }

    fn group(&mut self, kind: EdgeKind, cosine: bool, pairs: impl IntoIterator<Item = (usize, usize)>) {
        let g = self.groups.len();
        self.groups.push(EdgeGroup { kind, cosine });
        for (source, target) in pairs {
            self.edges.push(GroupedEdge {
                source,
                target,
                group: g,
            });
        }
    }
}

fn gamma_for(layout: &SequenceLayout, coarse_roles: &[CoarseRole]) -> Tensor {
    let mut gamma = Tensor::zeros(&[coarse_roles.len(), layout.total_len()]);
    for (f, role) in layout.roles().iter().enumerate() {
        let parent = match role {
            TokenRole::TsPatch { part, .. } => CoarseRole::TsPart(*part),
            TokenRole::Prompt { copy, .. } => CoarseRole::Prompt(*copy),
            TokenRole::Label { example } => CoarseRole::Label(*example),
        };
        let c = coarse_roles
            .iter()
            .position(|r| *r == parent)
            .expect("every fine role has a coarse parent");
        gamma.set(c, f, 1.0);
    }
    gamma
}

/// Vanilla layout: every series token feeds every prompt token (one group
/// per prompt token); coarse graph is the single edge series → prompt.
pub fn build_vca_spec(layout: &SequenceLayout) -> Result<GraphSpec> {
    if !layout.is_vanilla() {
        return Err(Error::WrongMode {
            expected: "vca",
            got: layout.mode_name(),
        });
    }
    build_forecast(layout, false)
}

/// Few-shot forecast layout. `pruned` keeps only edges into the first prompt
/// token and out of the last prompt token.
pub fn build_fsca_forecast_spec(layout: &SequenceLayout, pruned: bool) -> Result<GraphSpec> {
    match layout.structure() {
        Structure::Parts(p) if !p.is_empty() => build_forecast(layout, pruned),
        _ => Err(Error::WrongMode {
            expected: "fsca_forecast",
            got: layout.mode_name(),
        }),
    }
}

fn build_forecast(layout: &SequenceLayout, pruned: bool) -> Result<GraphSpec> {
    let n_parts = layout.num_segments();
    if n_parts < 1 {
        return Err(Error::InvalidArgument("need at least one part".into()));
    }
    let m = layout.prompt_len();
    let parts: Vec<Vec<usize>> = (0..n_parts).map(|j| layout.segment_positions(j)).collect();
    let prompts: Vec<Vec<usize>> = (0..n_parts).map(|i| layout.prompt_positions(i)).collect();

    let mut b = Builder::new();
    for i in 0..n_parts {
        for part in parts.iter().take(i + 1) {
            if pruned {
                let tgt = prompts[i][0];
                b.group(EdgeKind::First, true, part.iter().map(|&s| (s, tgt)));
            } else {
                for t in 0..m {
                    let tgt = prompts[i][t];
                    b.group(EdgeKind::First, true, part.iter().map(|&s| (s, tgt)));
                }
            }
        }
    }
    for i in 0..n_parts.saturating_sub(1) {
        let next = &parts[i + 1];
        if pruned {
            let src = prompts[i][m - 1];
            b.group(EdgeKind::Second, true, next.iter().map(|&s| (src, s)));
        } else {
            for t in 0..m {
                let src = prompts[i][t];
                b.group(EdgeKind::Second, true, next.iter().map(|&s| (src, s)));
            }
        }
    }

    let mut coarse_roles = Vec::with_capacity(2 * n_parts);
    for j in 0..n_parts {
        coarse_roles.push(CoarseRole::TsPart(j));
        coarse_roles.push(CoarseRole::Prompt(j));
    }
    let mut coarse_edges = Vec::new();
    for i in 0..n_parts {
        for j in 0..=i {
            coarse_edges.push(CoarseEdge {
                source: 2 * j,
                target: 2 * i + 1,
                kind: EdgeKind::First,
            });
        }
    }
    for i in 0..n_parts - 1 {
        coarse_edges.push(CoarseEdge {
            source: 2 * i + 1,
            target: 2 * (i + 1),
            kind: EdgeKind::Second,
        });
    }
    let gamma = gamma_for(layout, &coarse_roles);
    Ok(GraphSpec {
        fine_nodes: layout.total_len(),
        fine_edges: b.edges,
        groups: b.groups,
        coarse_roles,
        coarse_edges,
        gamma,
    })
}

/// Few-shot classification layout (pruned): each series segment feeds the
/// first token of its prompt copy; the last prompt token of each
/// demonstration feeds its label with fixed weight 1.
pub fn build_fsca_class_spec(layout: &SequenceLayout) -> Result<GraphSpec> {
    let (examples, _) = match layout.structure() {
        Structure::Examples { examples, patches } => (*examples, *patches),
        _ => {
            return Err(Error::WrongMode {
                expected: "fsca_class",
                got: layout.mode_name(),
            })
        }
    };
    if examples == 0 {
        return Err(Error::InvalidArgument(
            "few-shot classification needs at least one example".into(),
        ));
    }
    let m = layout.prompt_len();
    let mut b = Builder::new();
    for k in 0..=examples {
        let tgt = layout.prompt_positions(k)[0];
        b.group(
            EdgeKind::First,
            true,
            layout.segment_positions(k).into_iter().map(|s| (s, tgt)),
        );
    }
    for k in 0..examples {
        let src = layout.prompt_positions(k)[m - 1];
        let label = layout.label_position(k).expect("label per example");
        b.group(EdgeKind::Second, false, [(src, label)]);
    }

    let mut coarse_roles = Vec::new();
    for k in 0..=examples {
        coarse_roles.push(CoarseRole::TsPart(k));
        coarse_roles.push(CoarseRole::Prompt(k));
        if k < examples {
            coarse_roles.push(CoarseRole::Label(k));
        }
    }
    let mut coarse_edges = Vec::new();
    for k in 0..=examples {
        coarse_edges.push(CoarseEdge {
            source: 3 * k,
            target: 3 * k + 1,
            kind: EdgeKind::First,
        });
    }
    for k in 0..examples {
        coarse_edges.push(CoarseEdge {
            source: 3 * k + 1,
            target: 3 * k + 2,
            kind: EdgeKind::Second,
        });
    }
    let gamma = gamma_for(layout, &coarse_roles);
    Ok(GraphSpec {
        fine_nodes: layout.total_len(),
        fine_edges: b.edges,
        groups: b.groups,
        coarse_roles,
        coarse_edges,
        gamma,
    })
}

/// Graph for any layout: vanilla, few-shot forecast, or few-shot classification.
pub fn build_spec(layout: &SequenceLayout, pruned: bool) -> Result<GraphSpec> {
    match layout.structure() {
        Structure::Parts(_) if layout.is_vanilla() => build_vca_spec(layout),
        Structure::Parts(_) => build_fsca_forecast_spec(layout, pruned),
        Structure::Examples { .. } => build_fsca_class_spec(layout),
    }
}

/// Cosine-derived fine weights and unit coarse weights from the current
/// fine node embeddings (`L_f × M`).
pub fn compute_edge_weights(spec: &GraphSpec, fine_nodes: &Tensor) -> Result<(WeightedAdjacency, WeightedAdjacency)> {
    if fine_nodes.rows() != spec.fine_nodes() || !fine_nodes.is_matrix() {
        return Err(Error::dim(
            "compute_edge_weights",
            format!("{} fine nodes vs embeddings {:?}", spec.fine_nodes(), fine_nodes.shape()),
        ));
    }
    let w = gops::group_weights(fine_nodes, &spec.fine_edges, &spec.group_cosine());
    Ok((spec.fine_adjacency(&w), spec.coarse_adjacency()))
}

/// Per-edge fine weights (same order as [`GraphSpec::fine_edges`]).
pub fn fine_edge_weights(spec: &GraphSpec, fine_nodes: &Tensor) -> Vec<f64> {
    gops::group_weights(fine_nodes, &spec.fine_edges, &spec.group_cosine())
}

/// `Â = D^{-1/2}(A + I)D^{-1/2}`, `D_ii = Σ_j (A + I)_ij`.
pub fn normalize_adjacency(a: &WeightedAdjacency) -> Result<Tensor> {
    let m = &a.matrix;
    if !m.is_matrix() || m.rows() != m.cols() {
        return Err(Error::dim("normalize_adjacency", format!("{:?}", m.shape())));
    }
    if m.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("adjacency must be nonnegative".into()));
    }
    Ok(gops::sym_normalize(m).0)
}

/// Plain-text matrix: `rows cols` header then row-major space-separated values.
pub fn format_matrix(m: &Tensor) -> String {
    let mut out = format!("{} {}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Parses [`format_matrix`] output.
pub fn parse_matrix(text: &str) -> Result<Tensor> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse { row: 0, message: "empty matrix".into() })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse { row: 0, message: e.to_string() })?;
    if dims.len() != 2 {
        return Err(Error::Parse { row: 0, message: "header must be `rows cols`".into() });
    }
    let mut data = Vec::with_capacity(dims[0] * dims[1]);
    for (i, line) in lines.enumerate() {
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|e| Error::Parse {
                row: i + 1,
                message: e.to_string(),
            })?);
        }
    }
    Tensor::new(dims, data)
}

/// `src tgt weight group` per fine edge.
pub fn format_fine_edges(spec: &GraphSpec, weights: &[f64]) -> String {
    let mut out = String::new();
    for (e, w) in spec.fine_edges.iter().zip(weights) {
        let _ = writeln!(out, "{} {} {} {}", e.source, e.target, w, e.group);
    }
    out
}

/// `src tgt weight group` per coarse edge; the group column is the edge kind
/// (0 = series→prompt, 1 = prompt→answer).
pub fn format_coarse_edges(spec: &GraphSpec) -> String {
    let mut out = String::new();
    for e in &spec.coarse_edges {
        let _ = writeln!(out, "{} {} 1 {}", e.source, e.target, e.kind.code());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vca_small() {
        let layout = SequenceLayout::vca(2, 2).unwrap();
        let spec = build_vca_spec(&layout).unwrap();
        assert_eq!(spec.fine_edges().len(), 4);
        assert_eq!(spec.coarse_edges().len(), 1);
        assert_eq!(spec.gamma().data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);

        let one = SequenceLayout::vca(1, 1).unwrap();
        let spec = build_vca_spec(&one).unwrap();
        let nodes = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.1]]).unwrap();
        assert_eq!(fine_edge_weights(&spec, &nodes), vec![1.0]);
    }

    #[test]
    fn vca_rejects_parts() {
        let layout = SequenceLayout::few_shot_forecast(&[2, 2], 4, 2).unwrap();
        assert!(matches!(build_vca_spec(&layout), Err(Error::WrongMode { .. })));
        let class = SequenceLayout::few_shot_class(1, 2, 2).unwrap();
        assert!(build_fsca_forecast_spec(&class, true).is_err());
    }

    #[test]
    fn fsca_forecast_counts() {
        let layout = SequenceLayout::few_shot_forecast(&[4, 4], 8, 3).unwrap();
        let pruned = build_fsca_forecast_spec(&layout, true).unwrap();
        assert_eq!(pruned.fine_edges().len(), 16);
        let first = pruned.fine_edges().iter().filter(|e| pruned.edge_kind(e) == EdgeKind::First).count();
        assert_eq!(first, 12);
        assert_eq!(pruned.coarse_edges().len(), 4);
        let full = build_fsca_forecast_spec(&layout, false).unwrap();
        assert_eq!(full.fine_edges().len(), 48);

        let three = SequenceLayout::few_shot_forecast(&[1, 1, 1], 3, 1).unwrap();
        assert_eq!(build_fsca_forecast_spec(&three, true).unwrap().coarse_edges().len(), 8);
    }

    #[test]
    fn fsca_class_counts() {
        let layout = SequenceLayout::few_shot_class(2, 4, 3).unwrap();
        let spec = build_fsca_class_spec(&layout).unwrap();
        let first = spec.fine_edges().iter().filter(|e| spec.edge_kind(e) == EdgeKind::First).count();
        assert_eq!(first, 12);
        assert_eq!(spec.fine_edges().len() - first, 2);
        assert_eq!(spec.coarse_edges().len(), 5);

        let tiny = SequenceLayout::few_shot_class(1, 1, 1).unwrap();
        let spec = build_fsca_class_spec(&tiny).unwrap();
        let nodes = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.5], vec![0.2, 0.2], vec![0.0, 1.0]]).unwrap();
        assert_eq!(fine_edge_weights(&spec, &nodes), vec![1.0, 1.0, 1.0]);
        // query segment (k = l) has no label edge
        let query_prompt_last = tiny.prompt_positions(1)[0];
        assert!(spec.fine_edges().iter().all(|e| e.source != query_prompt_last));
    }

    #[test]
    fn normalize_two_node() {
        let mut a = Tensor::zeros(&[2, 2]);
        a.set(1, 0, 1.0);
        let n = normalize_adjacency(&WeightedAdjacency { matrix: a }).unwrap();
        assert!((n.get(1, 0) - 0.70711).abs() < 1e-5);
        assert_eq!(n.get(1, 1), 0.5);
        let iso = normalize_adjacency(&WeightedAdjacency { matrix: Tensor::zeros(&[3, 3]) }).unwrap();
        assert_eq!(iso, Tensor::identity(3));
    }

    #[test]
    fn matrix_text_roundtrip() {
        let m = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.70710678, -2.0]]).unwrap();
        let s = format_matrix(&m);
        assert!(s.starts_with("2 2\n"));
        assert_eq!(parse_matrix(&s).unwrap(), m);
    }
}
