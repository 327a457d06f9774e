//! Dual-scale context-alignment block: coarse projection, GCN update on both
//! scales, and the learnable coarse→fine interaction.
//!
//! Matrices are rows = nodes throughout. The column-form update
//! `N̂ = σ(Â Nᵀ W)` becomes `σ(Â · N · W)` with `N: L×M`, and the interaction
//! `ΔN = W_cf · N̂_C · Γ` becomes `ΔN = Γᵀ · N̂_C · W_cfᵀ` (rows of `ΔN` are
//! fine nodes).

use crate::error::{Error, Result};
use crate::graphspec::{normalize_adjacency, CoarseRole, GraphSpec};
use crate::numerics::graph as gops;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::tsembed::SequenceLayout;

/// `f_e` (series parts) and `f_z` (prompt copies). Created once per model and
/// used only at the first insertion.
#[derive(Clone, Copy, Debug)]
pub struct CoarseProjector {
    pub fe_weight: ParamId,
    pub fe_bias: ParamId,
    pub fz_weight: ParamId,
    pub fz_bias: ParamId,
    pub max_part_len: usize,
    pub prompt_len: usize,
}

/// Learnable matrices of one insertion: `W_F`, `W_C` and `W_cf`, all `M×M`.
#[derive(Clone, Copy, Debug)]
pub struct DscaParams {
    pub w_fine: ParamId,
    pub w_coarse: ParamId,
    pub w_cf: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct DscaVars {
    pub w_fine: Var,
    pub w_coarse: Var,
    pub w_cf: Var,
}

impl DscaParams {
    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> Result<DscaVars> {
        Ok(DscaVars {
            w_fine: tape.param(store, self.w_fine)?,
            w_coarse: tape.param(store, self.w_coarse)?,
            w_cf: tape.param(store, self.w_cf)?,
        })
    }
}

/// Fine (`L_f × M`) and, once created, coarse (`L_c × M`) node matrices.
#[derive(Clone, Copy, Debug)]
pub struct DualScaleState {
    pub fine: Var,
    pub coarse: Option<Var>,
}

/// Where fine edge weights come from at a block.
#[derive(Clone, Debug)]
pub enum FineWeights {
    /// Cosine weights from the current fine embeddings, held constant.
    Cosine,
    /// Cosine weights with gradients flowing into the embeddings.
    CosineDifferentiable,
    /// Fixed per-edge weights (random-adjacency ablation).
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct BlockOptions {
    pub fine_weights: FineWeights,
    /// `false` drops the coarse GCN and the interaction entirely.
    pub coarse_branch: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            fine_weights: FineWeights::Cosine,
            coarse_branch: true,
        }
    }
}

/// Builds the coarse node matrix from the fine one.
///
/// Each series part is left-padded with zero rows to `max_part_len`, flattened
/// and passed through `f_e`. Every prompt copy maps to the same coarse node,
/// `f_z` of the first copy's rows. Label nodes are copied through.
pub fn coarse_project(
    tape: &mut Tape,
    store: &ParamStore,
    fine: Var,
    layout: &SequenceLayout,
    spec: &GraphSpec,
    projector: &CoarseProjector,
) -> Result<Var> {
    let m = tape.value(fine).cols();
    if tape.value(fine).rows() != layout.total_len() {
        return Err(Error::dim(
            "coarse_project",
            format!("fine has {} rows, layout {}", tape.value(fine).rows(), layout.total_len()),
        ));
    }
    if layout.prompt_len() != projector.prompt_len {
        return Err(Error::InvalidArgument(format!(
            "projector built for prompt length {}, layout has {}",
            projector.prompt_len,
            layout.prompt_len()
        )));
    }
    let fe_w = tape.param(store, projector.fe_weight)?;
    let fe_b = tape.param(store, projector.fe_bias)?;
    let mut prompt_node: Option<Var> = None;
    let mut rows = Vec::with_capacity(spec.coarse_nodes());
    for role in spec.coarse_roles() {
        let node = match *role {
            CoarseRole::TsPart(j) => {
                let pos = layout.segment_positions(j);
                let len = pos.len();
                if len > projector.max_part_len {
                    return Err(Error::InvalidArgument(format!(
                        "part of {len} patches exceeds configured maximum {}",
                        projector.max_part_len
                    )));
                }
                let seg = tape.slice_rows(fine, pos[0], len)?;
                let padded = if len < projector.max_part_len {
                    let zeros = tape.constant(Tensor::zeros(&[projector.max_part_len - len, m]))?;
                    tape.concat_rows(&[zeros, seg])?
                } else {
                    seg
                };
                let flat = tape.reshape(padded, &[1, projector.max_part_len * m])?;
                let h = tape.matmul(flat, fe_w)?;
                tape.add_bias(h, fe_b)?
            }
            CoarseRole::Prompt(_) => match prompt_node {
                Some(v) => v,
                None => {
                    let pos = layout.prompt_positions(0);
                    let seg = tape.slice_rows(fine, pos[0], pos.len())?;
                    let flat = tape.reshape(seg, &[1, pos.len() * m])?;
                    let fz_w = tape.param(store, projector.fz_weight)?;
                    let fz_b = tape.param(store, projector.fz_bias)?;
                    let h = tape.matmul(flat, fz_w)?;
                    let v = tape.add_bias(h, fz_b)?;
                    prompt_node = Some(v);
                    v
                }
            },
            CoarseRole::Label(k) => {
                let pos = layout
                    .label_position(k)
                    .ok_or_else(|| Error::InvalidArgument(format!("layout has no label {k}")))?;
                tape.slice_rows(fine, pos, 1)?
            }
        };
        rows.push(node);
    }
    tape.concat_rows(&rows)
}

/// `relu(Â · nodes · W)`.
pub fn gcn_forward(tape: &mut Tape, nodes: Var, a_hat: Var, w: Var) -> Result<Var> {
    let (l, a) = (tape.value(nodes).rows(), tape.value(a_hat));
    if a.rows() != l || a.cols() != l {
        return Err(Error::dim(
            "gcn_forward",
            format!("{l} nodes vs adjacency {:?}", a.shape()),
        ));
    }
    let agg = tape.matmul(a_hat, nodes)?;
    let lin = tape.matmul(agg, w)?;
    tape.relu(lin)
}

/// `fine_out + Γᵀ · coarse_out · W_cfᵀ`.
pub fn interaction(tape: &mut Tape, fine_out: Var, coarse_out: Var, gamma: &Tensor, w_cf: Var) -> Result<Var> {
    let (lf, lc) = (tape.value(fine_out).rows(), tape.value(coarse_out).rows());
    if gamma.rows() != lc || gamma.cols() != lf {
        return Err(Error::dim(
            "interaction",
            format!("gamma {:?} vs coarse {lc} / fine {lf}", gamma.shape()),
        ));
    }
    let gamma_t = tape.constant(gamma.transpose())?;
    let spread = tape.matmul(gamma_t, coarse_out)?;
    let w_t = tape.transpose(w_cf)?;
    let delta = tape.matmul(spread, w_t)?;
    tape.add(fine_out, delta)
}

/// Normalized fine adjacency for the current fine embeddings.
pub fn fine_adjacency(tape: &mut Tape, fine: Var, spec: &GraphSpec, source: &FineWeights) -> Result<Var> {
    match source {
        FineWeights::Cosine => {
            let w = gops::group_weights(tape.value(fine), spec.fine_edges(), &spec.group_cosine());
            tape.constant(normalize_adjacency(&spec.fine_adjacency(&w))?)
        }
        FineWeights::CosineDifferentiable => {
            let a = tape.edge_weights(fine, spec.fine_edges(), &spec.group_cosine())?;
            tape.sym_normalize(a)
        }
        FineWeights::Fixed(w) => {
            if w.len() != spec.fine_edges().len() {
                return Err(Error::dim("fine_adjacency", "fixed weight count != edge count"));
            }
            tape.constant(normalize_adjacency(&spec.fine_adjacency(w))?)
        }
    }
}

/// One block on already-resolved parameter handles.
pub fn dsca_apply(
    tape: &mut Tape,
    state: DualScaleState,
    spec: &GraphSpec,
    w: &DscaVars,
    opts: &BlockOptions,
) -> Result<DualScaleState> {
    if tape.value(state.fine).rows() != spec.fine_nodes() {
        return Err(Error::dim(
            "dsca_block",
            format!("fine state {} rows vs {} graph nodes", tape.value(state.fine).rows(), spec.fine_nodes()),
        ));
    }
    let a_fine = fine_adjacency(tape, state.fine, spec, &opts.fine_weights)?;
    let fine_out = gcn_forward(tape, state.fine, a_fine, w.w_fine)?;
    if !opts.coarse_branch {
        return Ok(DualScaleState {
            fine: fine_out,
            coarse: None,
        });
    }
    let coarse = state
        .coarse
        .ok_or_else(|| Error::Contract("coarse branch enabled but no coarse state".into()))?;
    if tape.value(coarse).rows() != spec.coarse_nodes() {
        return Err(Error::dim("dsca_block", "coarse state / graph node count mismatch"));
    }
    let a_coarse = tape.constant(normalize_adjacency(&spec.coarse_adjacency())?)?;
    let coarse_out = gcn_forward(tape, coarse, a_coarse, w.w_coarse)?;
    let fine_new = interaction(tape, fine_out, coarse_out, spec.gamma(), w.w_cf)?;
    Ok(DualScaleState {
        fine: fine_new,
        coarse: Some(coarse_out),
    })
}

/// One block with parameters looked up from `store`.
pub fn dsca_block(
    tape: &mut Tape,
    store: &ParamStore,
    state: DualScaleState,
    spec: &GraphSpec,
    params: &DscaParams,
    opts: &BlockOptions,
) -> Result<DualScaleState> {
    let vars = params.vars(tape, store)?;
    dsca_apply(tape, state, spec, &vars, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphspec::build_vca_spec;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn gcn_identity_and_clamp() {
        let mut tape = Tape::new();
        let n = tape.constant(t(&[vec![1.0, -2.0], vec![3.0, 4.0]])).unwrap();
        let i = tape.constant(Tensor::identity(2)).unwrap();
        let out = gcn_forward(&mut tape, n, i, i).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0, 3.0, 4.0]);

        let pos = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let out = gcn_forward(&mut tape, pos, i, i).unwrap();
        assert_eq!(tape.value(out), tape.value(pos));
    }

    #[test]
    fn interaction_cases() {
        let mut tape = Tape::new();
        let fine = tape.constant(t(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]])).unwrap();
        let coarse = tape.constant(t(&[vec![5.0, 6.0], vec![7.0, 8.0]])).unwrap();
        let gamma = t(&[vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let zero = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let out = interaction(&mut tape, fine, coarse, &gamma, zero).unwrap();
        assert_eq!(tape.value(out), tape.value(fine));

        let zf = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let eye = tape.constant(Tensor::identity(2)).unwrap();
        let out = interaction(&mut tape, zf, coarse, &gamma, eye).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn zero_weight_block_gives_zero_fine() {
        let layout = SequenceLayout::vca(1, 1).unwrap();
        let spec = build_vca_spec(&layout).unwrap();
        let mut tape = Tape::new();
        let fine = tape.constant(t(&[vec![1.0, -1.0, 0.5], vec![0.2, 0.3, 0.4]])).unwrap();
        let coarse = tape.constant(t(&[vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]])).unwrap();
        let z = tape.constant(Tensor::zeros(&[3, 3])).unwrap();
        let w = DscaVars { w_fine: z, w_coarse: z, w_cf: z };
        let st = dsca_apply(&mut tape, DualScaleState { fine, coarse: Some(coarse) }, &spec, &w, &BlockOptions::default()).unwrap();
        assert!(tape.value(st.fine).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(st.fine).shape(), &[2, 3]);
        assert_eq!(tape.value(st.coarse.unwrap()).shape(), &[2, 3]);
    }

    #[test]
    fn coarse_projection_shares_prompt_node() {
        let layout = SequenceLayout::few_shot_forecast(&[4, 4], 8, 2).unwrap();
        let spec = crate::graphspec::build_fsca_forecast_spec(&layout, true).unwrap();
        let m = 3;
        let mut store = ParamStore::new();
        let mut fe_b = Tensor::zeros(&[m]);
        fe_b.data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
        let proj = CoarseProjector {
            fe_weight: store.add("fe_w", Tensor::zeros(&[4 * m, m]), true),
            fe_bias: store.add("fe_b", fe_b, true),
            fz_weight: store.add("fz_w", Tensor::filled(&[2 * m, m], 0.1), true),
            fz_bias: store.add("fz_b", Tensor::zeros(&[m]), true),
            max_part_len: 4,
            prompt_len: 2,
        };
        let mut tape = Tape::new();
        let fine = tape
            .constant(Tensor::new(vec![12, m], (0..36).map(|v| v as f64 * 0.1).collect()).unwrap())
            .unwrap();
        let c = coarse_project(&mut tape, &store, fine, &layout, &spec, &proj).unwrap();
        let cv = tape.value(c);
        assert_eq!(cv.shape(), &[4, m]);
        assert_eq!(cv.row(0), &[0.1, 0.2, 0.3]);
        assert_eq!(cv.row(2), &[0.1, 0.2, 0.3]);
        assert_eq!(cv.row(1), cv.row(3));
    }

    #[test]
    fn coarse_projection_rejects_long_part() {
        let layout = SequenceLayout::few_shot_forecast(&[2, 3], 5, 1).unwrap();
        let spec = crate::graphspec::build_fsca_forecast_spec(&layout, true).unwrap();
        let mut store = ParamStore::new();
        let proj = CoarseProjector {
            fe_weight: store.add("fe_w", Tensor::zeros(&[4, 2]), true),
            fe_bias: store.add("fe_b", Tensor::zeros(&[2]), true),
            fz_weight: store.add("fz_w", Tensor::zeros(&[2, 2]), true),
            fz_bias: store.add("fz_b", Tensor::zeros(&[2]), true),
            max_part_len: 2,
            prompt_len: 1,
        };
        let mut tape = Tape::new();
        let fine = tape.constant(Tensor::filled(&[7, 2], 1.0)).unwrap();
        assert!(coarse_project(&mut tape, &store, fine, &layout, &spec, &proj).is_err());
    }
}
