use serde::{Deserialize, Serialize};

use super::tensor::{Gradients, ParamStore};
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay. Parameters without a gradient in
/// `grads` are left untouched, including their decay.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config }
    }

    pub fn step(&self, params: &mut ParamStore, grads: &Gradients) -> Result<(), AutodiffError> {
        if !grads.all_finite() {
            return Err(AutodiffError::NonFinite("gradient"));
        }
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            p.steps += 1;
            let bc1 = 1.0 - beta1.powi(p.steps as i32);
            let bc2 = 1.0 - beta2.powi(p.steps as i32);
            let decay = 1.0 - lr * weight_decay;
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                theta[i] *= decay;
                let m = beta1 * p.first_moment[i] + (1.0 - beta1) * g[i];
                let v = beta2 * p.second_moment[i] + (1.0 - beta2) * g[i] * g[i];
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                theta[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            }
        }
        if !params.all_finite() {
            return Err(AutodiffError::NonFinite("parameter"));
        }
        Ok(())
    }
}
