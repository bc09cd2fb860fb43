//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Number of updates applied so far (bias correction).
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            config,
            t: 0,
        }
    }

    /// One update. Parameters with `decay == false` skip weight decay; parameters
    /// without a gradient still advance their moments with a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let decay = store.entry(id).decay;
            let g = grads.get(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            let shrink = if decay { 1.0 - lr * weight_decay } else { 1.0 };
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i] as f64);
                let mi = c.beta1 * m.data()[i] as f64 + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] as f64 + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                let pi = p.data()[i] as f64;
                p.data_mut()[i] = (pi * shrink - lr * update) as f32;
            }
        }
    }
}

/// Linear warmup over `warmup` steps, then cosine decay towards zero.
/// `step` is 0-based.
pub fn learning_rate(base: f64, step: u64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
