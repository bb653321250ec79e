//! AdamW with decoupled weight decay, and the batch-size learning-rate rule.

use phnet_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PhnetError, Result};
use crate::params::ParamStore;

/// Initial learning rate `1e-3 · batch_size / 1024`.
pub fn lr_for_batch(batch_size: usize) -> f64 {
    1e-3 * batch_size as f64 / 1024.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return invalid(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return invalid(format!("eps must be positive and weight decay non-negative, got {} and {}", self.eps, self.weight_decay));
        }
        Ok(())
    }
}

/// One AdamW update of a single scalar at step `t ≥ 1`; returns the new
/// parameter and updates the moments in place.
#[inline]
pub fn adamw_scalar(p: f64, g: f64, m: &mut f64, v: &mut f64, t: u64, lr: f64, cfg: &AdamWConfig) -> f64 {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / (1.0 - cfg.beta1.powi(t as i32));
    let v_hat = *v / (1.0 - cfg.beta2.powi(t as i32));
    p * (1.0 - lr * cfg.weight_decay) - lr * m_hat / (v_hat.sqrt() + cfg.eps)
}

/// Optimizer state for every parameter of a store. Moments are kept in f64
/// regardless of the parameter type.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Number of completed steps.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Element>(store: &ParamStore<T>, cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Ok(AdamW { cfg, t: 0, m: zeros(), v: zeros() })
    }

    /// Applies the accumulated gradients of `store` at learning rate `lr`.
    /// A non-finite gradient aborts before any parameter changes.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let step = self.t as usize + 1;
        for p in store.iter() {
            if !p.grad.all_finite() {
                return Err(PhnetError::Training { step, msg: format!("non-finite gradient in {}", p.name) });
            }
        }
        self.t += 1;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let values = p.value.data();
            let grads = p.grad.data();
            let next: Vec<T> = values
                .iter()
                .zip(grads.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|((&x, &g), (m, v))| T::of(adamw_scalar(x.f64(), g.f64(), m, v, self.t, lr, &self.cfg)))
                .collect();
            p.value = Tensor::from_vec(p.value.shape(), next)?;
        }
        Ok(())
    }
}
