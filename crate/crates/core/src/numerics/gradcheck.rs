//! Central finite-difference gradient oracle.
//!
//! The oracle only ever evaluates the forward pass of the supplied closure on
//! a fresh tape, so it is independent of the reverse-mode path it checks.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute differences at or below this pass regardless of scale.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub failures: Vec<GradMismatch>,
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Evaluates `f(x + h e_i) - f(x - h e_i) / 2h` for every scalar of every
/// input tensor.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs
            .iter()
            .map(|x| tape.leaf(x.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for k in 0..inputs[i].numel() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Reverse-mode gradient of `f` at `inputs`.
pub fn analytic_gradient<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| tape.leaf(x.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect())
}

/// Compares reverse-mode and finite-difference gradients elementwise.
///
/// An entry passes when `|a - n| <= abs_floor` or
/// `|a - n| / max(|a|, |n|) <= rel_tol`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(&f, inputs, cfg.step)?;
    Ok(compare(&analytic, &numeric, cfg))
}

pub fn compare(analytic: &[Tensor], numeric: &[Tensor], cfg: GradCheckConfig) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        failures: Vec::new(),
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (k, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            report.checked += 1;
            let abs = (av - nv).abs();
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs <= cfg.abs_floor {
                continue;
            }
            let rel = abs / av.abs().max(nv.abs());
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > cfg.rel_tol {
                report.failures.push(GradMismatch {
                    input: i,
                    index: k,
                    analytic: av,
                    numeric: nv,
                });
            }
        }
    }
    report
}
