use serde::{Deserialize, Serialize};

use super::{Grads, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adaptive-moment optimiser state over a store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self { config, step: 0, moments: vec![None; store.len()] }
    }

    /// One bias-corrected update of the listed parameters. Parameters outside
    /// `trainable` are never written. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, trainable: &[ParamId]) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for &id in trainable {
            let n = store.get(id).len();
            let mom = self.moments[id.0].get_or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let zero;
            let g: &Tensor = match grads.param(id) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(1, n);
                    &zero
                }
            };
            let p = store.get_mut(id);
            for i in 0..n {
                let gi = g.data[i];
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * gi;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * gi * gi;
                let mh = mom.m[i] / bc1;
                let vh = mom.v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
