use serde::{Deserialize, Serialize};

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    cfg: AdamConfig,
    step: u64,
) {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Adam state for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = || store.params().iter().map(|p| vec![0.0; p.value().numel()]).collect();
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies the accumulated gradients of `store` with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let grad = p.grad.data().to_vec();
            adam_step(
                p.value_mut().data_mut(),
                &grad,
                &mut self.m[i],
                &mut self.v[i],
                lr,
                self.cfg,
                self.step,
            );
        }
    }
}
