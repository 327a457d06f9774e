//! Compares reverse-mode gradients of one dual-scale block with central
//! finite differences.
//!
//! cargo run --example gradient_check

use ctxalign::dscagnn::{dsca_apply, BlockOptions, DscaVars, DualScaleState, FineWeights};
use ctxalign::graphspec::build_fsca_forecast_spec;
use ctxalign::numerics::gradcheck::{check_gradients, GradCheckConfig};
use ctxalign::numerics::{Tape, Tensor, Var};
use ctxalign::tsembed::SequenceLayout;
use rand::SeedableRng;

fn main() -> ctxalign::Result<()> {
    let layout = SequenceLayout::few_shot_forecast(&[2, 2], 4, 2)?;
    let spec = build_fsca_forecast_spec(&layout, true)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let m = 4;
    let inputs = vec![
        Tensor::uniform(&[spec.fine_nodes(), m], 1.0, &mut rng),
        Tensor::uniform(&[spec.coarse_nodes(), m], 1.0, &mut rng),
        Tensor::uniform(&[m, m], 1.0, &mut rng),
        Tensor::uniform(&[m, m], 1.0, &mut rng),
        Tensor::uniform(&[m, m], 1.0, &mut rng),
    ];
    let opts = BlockOptions {
        fine_weights: FineWeights::CosineDifferentiable,
        coarse_branch: true,
    };
    let block = |tape: &mut Tape, v: &[Var]| {
        let state = DualScaleState { fine: v[0], coarse: Some(v[1]) };
        let w = DscaVars { w_fine: v[2], w_coarse: v[3], w_cf: v[4] };
        let out = dsca_apply(tape, state, &spec, &w, &opts)?;
        let sq = tape.mul(out.fine, out.fine)?;
        tape.sum(sq)
    };
    let report = check_gradients(block, &inputs, GradCheckConfig::default())?;
    println!(
        "{} entries checked, max relative error {:.2e}, max absolute error {:.2e}",
        report.checked, report.max_rel_err, report.max_abs_err
    );
    for f in report.failures.iter().take(10) {
        println!("input {} entry {}: analytic {:.6e} numeric {:.6e}", f.input, f.index, f.analytic, f.numeric);
    }
    if !report.passed() {
        std::process::exit(1);
    }
    Ok(())
}
