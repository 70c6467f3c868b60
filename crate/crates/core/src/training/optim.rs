use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Weight decay applies to matrices and tables only, not to vectors
/// (biases and layer-norm parameters).
fn decays(t: &Tensor) -> bool {
    t.shape().len() >= 2
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            ..Default::default()
        }
    }

    /// One bias-corrected update with decoupled weight decay. Parameters
    /// missing from `grads` are treated as having zero gradient. A
    /// non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if p.len() != g.len() {
                return Err(Error::Shape {
                    op: "adamw",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {name}[{i}] is {} at optimizer step {}",
                    g[i],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (name, p) in params.iter_mut() {
            let n = p.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name);
            let wd = if decays(p) { weight_decay } else { 0.0 };
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = (m[i] / bc1) / (libm::sqrt(v[i] / bc2) + eps);
                *w -= lr * (update + wd * *w);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let total = libm::sqrt(grads.values().flatten().map(|g| g * g).sum::<f64>());
    if total > max_norm && total.is_finite() {
        let s = max_norm / total;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    total
}
