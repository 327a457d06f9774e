//! Gradient cases: every differentiable op reduced to a scalar through a
//! fixed random projection, plus an end-to-end check on a tiny model.

use ctxalign::backbone::{BackboneConfig, FreezePolicy, LossKind};
use ctxalign::dscagnn::{
    coarse_project, dsca_apply, gcn_forward, interaction, BlockOptions, CoarseProjector, DscaVars, DualScaleState,
    FineWeights,
};
use ctxalign::graphspec::{build_fsca_forecast_spec, normalize_adjacency};
use ctxalign::harness::train::{batch_gradients, build_dataset};
use ctxalign::harness::RunConfig;
use ctxalign::model::{Model, ModelConfig};
use ctxalign::numerics::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use ctxalign::numerics::{ParamStore, Tape, Tensor, Var};
use ctxalign::tsembed::SequenceLayout;
use ctxalign::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    f: OpFn,
    inputs: Vec<Tensor>,
}

impl OpCase {
    pub fn run(&self) -> Result<GradCheckReport> {
        check_gradients(|t: &mut Tape, v: &[Var]| (self.f)(t, v), &self.inputs, GradCheckConfig::default())
    }
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::uniform(tape.value(out).shape(), 1.0, &mut rng);
    let r = tape.constant(r)?;
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let t = rand(shape, seed);
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.abs() + 0.1).collect()).unwrap()
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        f: Box::new(move |t, v| {
            let out = f(t, v)?;
            if t.value(out).numel() == 1 {
                Ok(out)
            } else {
                project(t, out, 99)
            }
        }),
        inputs,
    }
}

fn small_layout() -> SequenceLayout {
    SequenceLayout::few_shot_forecast(&[2, 3], 5, 2).unwrap()
}

pub fn op_cases() -> Vec<OpCase> {
    let layout = small_layout();
    let spec = build_fsca_forecast_spec(&layout, true).unwrap();
    let lf = layout.total_len();
    let lc = spec.coarse_nodes();
    let gamma = spec.gamma().clone();
    let a_hat = normalize_adjacency(&spec.fine_adjacency(&vec![0.5; spec.fine_edges().len()])).unwrap();
    let edges = spec.fine_edges().to_vec();
    let cosine = spec.group_cosine();

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let projector = CoarseProjector {
        fe_weight: store.add("fe.w", Tensor::uniform(&[3 * 3, 3], 0.5, &mut rng), true),
        fe_bias: store.add("fe.b", Tensor::uniform(&[3], 0.5, &mut rng), true),
        fz_weight: store.add("fz.w", Tensor::uniform(&[2 * 3, 3], 0.5, &mut rng), true),
        fz_bias: store.add("fz.b", Tensor::uniform(&[3], 0.5, &mut rng), true),
        max_part_len: 3,
        prompt_len: 2,
    };
    let (spec2, spec3, layout2) = (spec.clone(), spec.clone(), layout.clone());

    vec![
        case("matmul", vec![rand(&[3, 4], 1), rand(&[4, 2], 2)], |t, v| t.matmul(v[0], v[1])),
        case("transpose", vec![rand(&[3, 4], 3)], |t, v| t.transpose(v[0])),
        case("add", vec![rand(&[2, 3], 4), rand(&[2, 3], 5)], |t, v| t.add(v[0], v[1])),
        case("sub", vec![rand(&[2, 3], 6), rand(&[2, 3], 7)], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![rand(&[2, 3], 8), rand(&[2, 3], 9)], |t, v| t.mul(v[0], v[1])),
        case("add_bias", vec![rand(&[3, 4], 10), rand(&[4], 11)], |t, v| t.add_bias(v[0], v[1])),
        case("scale", vec![rand(&[2, 2], 12)], |t, v| t.scale(v[0], -1.7)),
        case("relu", vec![rand(&[4, 4], 13)], |t, v| t.relu(v[0])),
        case("gelu", vec![rand(&[4, 4], 14)], |t, v| t.gelu(v[0])),
        case("softmax_rows", vec![rand(&[3, 5], 15)], |t, v| t.softmax_rows(v[0])),
        case("causal_softmax", vec![rand(&[4, 4], 16)], |t, v| t.causal_softmax(v[0])),
        case("layer_norm", vec![rand(&[3, 5], 17), rand(&[5], 18), rand(&[5], 19)], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        case("gather_rows", vec![rand(&[5, 3], 20)], |t, v| t.gather_rows(v[0], &[0, 2, 2, 4])),
        case("concat_rows", vec![rand(&[2, 3], 21), rand(&[1, 3], 22)], |t, v| t.concat_rows(&[v[0], v[1]])),
        case("concat_cols", vec![rand(&[2, 3], 23), rand(&[2, 1], 24)], |t, v| t.concat_cols(&[v[0], v[1]])),
        case("slice_rows", vec![rand(&[4, 3], 25)], |t, v| t.slice_rows(v[0], 1, 2)),
        case("slice_cols", vec![rand(&[3, 4], 26)], |t, v| t.slice_cols(v[0], 1, 2)),
        case("reshape", vec![rand(&[2, 6], 27)], |t, v| t.reshape(v[0], &[3, 4])),
        case("sum", vec![rand(&[3, 3], 28)], |t, v| t.sum(v[0])),
        case("mean", vec![rand(&[3, 3], 29)], |t, v| t.mean(v[0])),
        case("mse", vec![rand(&[1, 6], 30)], |t, v| t.mse(v[0], &rand(&[1, 6], 31))),
        case("smape", vec![rand(&[1, 6], 32)], |t, v| t.smape(v[0], &rand(&[1, 6], 33), 1e-8)),
        case("cross_entropy", vec![rand(&[1, 5], 34)], |t, v| t.cross_entropy(v[0], 3)),
        case("edge_weights", vec![rand(&[lf, 3], 35)], move |t, v| t.edge_weights(v[0], &edges, &cosine)),
        case("sym_normalize", vec![positive(&[5, 5], 36)], |t, v| t.sym_normalize(v[0])),
        case("gcn_forward", vec![rand(&[lf, 3], 37), rand(&[3, 3], 38)], move |t, v| {
            let a = t.constant(a_hat.clone())?;
            gcn_forward(t, v[0], a, v[1])
        }),
        case(
            "interaction",
            vec![rand(&[lf, 3], 39), rand(&[lc, 3], 40), rand(&[3, 3], 41)],
            move |t, v| interaction(t, v[0], v[1], &gamma, v[2]),
        ),
        case(
            "dual_scale_block",
            vec![
                rand(&[lf, 3], 42),
                rand(&[lc, 3], 43),
                rand(&[3, 3], 44),
                rand(&[3, 3], 45),
                rand(&[3, 3], 46),
            ],
            move |t, v| {
                let state = DualScaleState {
                    fine: v[0],
                    coarse: Some(v[1]),
                };
                let w = DscaVars {
                    w_fine: v[2],
                    w_coarse: v[3],
                    w_cf: v[4],
                };
                let opts = BlockOptions {
                    fine_weights: FineWeights::CosineDifferentiable,
                    coarse_branch: true,
                };
                let out = dsca_apply(t, state, &spec2, &w, &opts)?;
                let c = project(t, out.coarse.expect("coarse state"), 7)?;
                let f = project(t, out.fine, 8)?;
                t.add(c, f)
            },
        ),
        case("coarse_project", vec![rand(&[lf, 3], 47)], move |t, v| {
            coarse_project(t, &store, v[0], &layout2, &spec3, &projector)
        }),
    ]
}

pub struct EndToEnd {
    pub checked: usize,
    pub failures: usize,
    pub max_rel: f64,
    pub max_abs: f64,
}

/// One layer, width 8, four patches, two prompt tokens, two parts; all
/// tensors trainable and cosine weights differentiable.
pub fn micro_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        input_len: 32,
        horizon: 4,
        patch_len: 8,
        patch_stride: 8,
        parts: 2,
        prompt: Some("ab".into()),
        differentiable_weights: true,
        backbone: BackboneConfig {
            layers: 1,
            width: 8,
            heads: 2,
            insertion_positions: vec![0, 1],
            max_seq_len: 16,
            freeze_policy: FreezePolicy::None,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.data.length = 200;
    cfg.data.window_stride = 8;
    cfg
}

/// Analytic parameter gradients of the training loss against central finite
/// differences taken by perturbing the parameter store directly.
pub fn micro_model_check() -> Result<EndToEnd> {
    let cfg = micro_config();
    let data = build_dataset(&cfg)?;
    let mut model = Model::new(cfg.model.clone(), 1)?;
    let batch = [0usize, 1];
    let (_, grads) = batch_gradients(&model, LossKind::Mse, &data, &batch)?;
    let h = 1e-5;
    let mut out = EndToEnd {
        checked: 0,
        failures: 0,
        max_rel: 0.0,
        max_abs: 0.0,
    };
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let analytic = grads.iter().find(|(g, _)| *g == id).map(|(_, t)| t.clone());
        for k in 0..model.store.value(id).numel() {
            let orig = model.store.value(id).data()[k];
            model.store.value_mut(id).data_mut()[k] = orig + h;
            let plus = batch_gradients(&model, LossKind::Mse, &data, &batch)?.0;
            model.store.value_mut(id).data_mut()[k] = orig - h;
            let minus = batch_gradients(&model, LossKind::Mse, &data, &batch)?.0;
            model.store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[k]);
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            out.checked += 1;
            out.max_abs = out.max_abs.max(err);
            if scale > 1e-6 {
                out.max_rel = out.max_rel.max(err / scale);
            }
            if err > 1e-8 && err / scale > 1e-3 {
                out.failures += 1;
            }
        }
    }
    Ok(out)
}
