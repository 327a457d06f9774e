//! Adam / RAdam and the epoch-level cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Radam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// `η_min + ½(lr0 − η_min)(1 + cos(π·min(t, T_max)/T_max))`.
pub fn lr_schedule(epoch: usize, lr0: f64, t_max: usize, eta_min: f64) -> f64 {
    if t_max == 0 {
        return lr0;
    }
    let t = epoch.min(t_max) as f64;
    eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * t / t_max as f64).cos())
}

/// First and second moments per parameter, indexed by `ParamId`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One update over the given gradients. Parameters absent from `grads` are
/// left untouched. Any non-finite gradient aborts before anything changes.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    cfg: &OptimConfig,
    lr: f64,
    state: &mut OptimizerState,
) -> Result<()> {
    for (id, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(store.get(*id).name.clone()));
        }
        if g.shape() != store.value(*id).shape() {
            return Err(Error::dim("optimizer_step", format!("gradient shape for `{}`", store.get(*id).name)));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let rect = match cfg.kind {
        OptimizerKind::Adam => Some(1.0),
        OptimizerKind::Radam => {
            let rho_inf = 2.0 / (1.0 - b2) - 1.0;
            let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bc2;
            (rho_t > 5.0).then(|| {
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
            })
        }
    };
    for (id, g) in grads {
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let p = store.value_mut(*id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            p[i] -= match rect {
                Some(r) => lr * r * m_hat / ((v[i] / bc2).sqrt() + cfg.eps),
                // variance estimate not yet trustworthy: momentum SGD
                None => lr * m_hat,
            };
        }
    }
    Ok(())
}
