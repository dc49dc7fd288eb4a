use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

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
        Self { lr: 1e-3, weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// AdamW with decoupled weight decay.
///
/// Update per coordinate after incrementing `t`:
/// `w ← w − lr·m̂/(√v̂ + ε) − lr·λ·w`, both terms evaluated at the old `w`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Result<Self> {
        if !(config.lr >= 0.0) || !(config.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate and weight decay must be non-negative, got lr={} wd={}",
                config.lr, config.weight_decay
            )));
        }
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Ok(Self { config, step: 0, first: zeros.clone(), second: zeros })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return dim_err(format!(
                "optimizer tracks {} parameters, store has {}, got {} gradients",
                self.first.len(),
                store.len(),
                grads.len()
            ));
        }
        for (id, g) in store.ids().zip(grads) {
            if store.get(id).value.shape() != g.shape() {
                return dim_err(format!(
                    "gradient for {} has shape {:?}, parameter is {:?}",
                    store.get(id).name,
                    g.shape(),
                    store.get(id).value.shape()
                ));
            }
        }

        self.step += 1;
        let AdamWConfig { lr, weight_decay, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (i, g) in grads.iter().enumerate() {
            let p = store.get_mut(ParamId(i));
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * *w;
            }
        }
        Ok(())
    }
}
