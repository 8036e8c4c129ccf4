//! Bias-corrected adaptive-moment optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers of one parameter and its own step count.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl MomentState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

pub fn adam_update(cfg: &AdamConfig, state: &mut MomentState, param: &mut [f64], grad: &[f64]) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_update",
            left: vec![param.len()],
            right: vec![grad.len()],
        });
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer over a [`ParamStore`]. Only trainable parameters that received
/// a gradient this step are updated; frozen parameters never get state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub state: BTreeMap<ParamId, MomentState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let t = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let state = self
                .state
                .entry(id)
                .or_insert_with(|| MomentState::zeros(grad.len()));
            adam_update(&self.cfg, state, t.data_mut(), &grad)?;
        }
        Ok(())
    }
}
