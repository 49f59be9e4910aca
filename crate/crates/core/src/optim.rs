//! AdamW with a cosine learning-rate schedule and linear warmup.

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Result, SdeError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 100,
            total_steps: 2000,
            min_lr: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.min_lr >= 0.0
            && self.total_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(SdeError::config(format!("invalid optimizer settings {self:?}")))
        }
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule { peak: self.lr, min_lr: self.min_lr, warmup: self.warmup_steps, total: self.total_steps }
    }
}

/// Linear warmup from zero to `peak`, then half-cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.peak - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First and second moment estimates for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore<S>) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One decoupled-weight-decay Adam update. Parameters without a gradient
    /// are left untouched (their moments are not advanced either).
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(SdeError::contract("gradient list does not match parameter store"));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(SdeError::divergence(format!("gradient of {}", store.name(id))));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (b1s, b2s) = (S::cast(b1), S::cast(b2));
        let (one_b1, one_b2) = (S::cast(1.0 - b1), S::cast(1.0 - b2));
        let step_size = S::cast(lr / bc1);
        let inv_bc2 = S::cast(1.0 / bc2);
        let eps = S::cast(self.eps);
        let decay = S::cast(1.0 - lr * self.weight_decay);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1s * m[j] + one_b1 * gj;
                v[j] = b2s * v[j] + one_b2 * gj * gj;
                let denom = (v[j] * inv_bc2).sqrt() + eps;
                p[j] = p[j] * decay - step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}
