//! Adam with bias correction and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm above which gradients are rescaled; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to `ids` using the gradients held in `store`.
    /// Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<f64> {
        if let Some(id) = ids.iter().find(|id| store.grad(**id).is_none()) {
            return Err(Error::MissingGrad(store.name(*id).to_string()));
        }
        let norm = store.grad_norm(ids);
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for &id in ids {
            let slot = id.index();
            if self.moments.len() <= slot {
                self.moments.resize_with(slot + 1, || None);
            }
            let n = store.value(id).len();
            let (m, v) = self.moments[slot].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = store.grad(id).expect("checked above").data().to_vec();
            let value = store.value_mut(id).data_mut();
            for k in 0..n {
                let g = grad[k] * clip;
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                value[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
