//! Adam with bias correction over a fixed set of parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    params: Vec<ParamId>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of a single buffer. `step` is the 1-based step count.
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f32,
    (b1, b2): (f32, f32),
    eps: f32,
) {
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

impl AdamState {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, config: AdamConfig) -> Self {
        let m = params.iter().map(|id| vec![0.0; store.get(*id).numel()]).collect();
        let v = params.iter().map(|id| vec![0.0; store.get(*id).numel()]).collect();
        Self {
            step: 0,
            lr: config.lr,
            betas: (config.beta1, config.beta2),
            eps: config.eps,
            params,
            m,
            v,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds a state from saved moments, checking shapes against `store`.
    pub fn restore(
        store: &ParamStore,
        params: Vec<ParamId>,
        config: AdamConfig,
        step: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::contract("adam moment count does not match parameters"));
        }
        for (i, id) in params.iter().enumerate() {
            let n = store.get(*id).numel();
            if m[i].len() != n || v[i].len() != n {
                return Err(Error::contract(format!(
                    "adam moments for {} have the wrong size",
                    store.name(*id)
                )));
            }
        }
        let mut state = Self::new(store, params, config);
        state.step = step;
        state.m = m;
        state.v = v;
        Ok(state)
    }

    /// Applies one update to every tracked parameter and clears their grads.
    pub fn apply(&mut self, store: &mut ParamStore) -> Result<()> {
        for id in &self.params {
            if store.get(*id).grad().is_none() {
                return Err(Error::contract(format!(
                    "adam step with missing gradient for {}",
                    store.name(*id)
                )));
            }
        }
        self.step += 1;
        for (k, id) in self.params.iter().enumerate() {
            let tensor = store.get_mut(*id);
            let grad = tensor.grad().expect("checked above").to_vec();
            adam_update(
                tensor.data_mut(),
                &grad,
                &mut self.m[k],
                &mut self.v[k],
                self.step,
                self.lr,
                self.betas,
                self.eps,
            );
            tensor.zero_grad();
        }
        Ok(())
    }
}
