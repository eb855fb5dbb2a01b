//! Adam with global gradient-norm clipping and decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NnError;

/// Optimizer hyperparameters. Defaults: lr 1e-4, betas (0.9, 0.95),
/// weight decay 0.1, global clip norm 1.0, epsilon 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

/// Adam state: first/second moment per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    cfg: AdamConfig,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<S>) -> Self {
        let m = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        let v = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Adam { cfg, m, v, step: 0 }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.m, &self.v)
    }

    /// Restores saved state; moment shapes must match the store.
    pub fn restore(
        cfg: AdamConfig,
        store: &ParamStore<S>,
        m: Vec<Tensor<S>>,
        v: Vec<Tensor<S>>,
        step: u64,
    ) -> Result<Self, NnError> {
        if m.len() != store.len() || v.len() != store.len() {
            return Err(NnError::Shape {
                op: "adam_restore",
                context: format!(
                    "{} params but {} first / {} second moments",
                    store.len(),
                    m.len(),
                    v.len()
                ),
            });
        }
        for (i, id) in store.ids().enumerate() {
            if m[i].shape() != store.value(id).shape() || v[i].shape() != store.value(id).shape() {
                return Err(NnError::Shape {
                    op: "adam_restore",
                    context: format!(
                        "moment shape mismatch for {}: {:?} / {:?} vs {:?}",
                        store.name(id),
                        m[i].shape(),
                        v[i].shape(),
                        store.value(id).shape()
                    ),
                });
            }
        }
        Ok(Adam { cfg, m, v, step })
    }

    /// One update from the gradients currently in `store`: global-norm clip,
    /// decoupled weight decay, then bias-corrected Adam. Fails fast on any
    /// non-finite gradient instead of skipping it.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<(), NnError> {
        for id in store.ids() {
            if !store.grad(id).is_finite() {
                return Err(NnError::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
        let norm = store.grad_global_norm();
        let clip_scale = if norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);
        let lr = S::from_f64(self.cfg.lr);
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.cfg.beta2);
        let eps = S::from_f64(self.cfg.eps);
        let wd = S::from_f64(self.cfg.lr * self.cfg.weight_decay);
        let cs = S::from_f64(clip_scale);
        let inv_bias1 = S::from_f64(1.0 / bias1);
        let inv_bias2 = S::from_f64(1.0 / bias2);

        let (values, grads) = store.values_and_grads_mut();
        for (i, (value, grad)) in values.iter_mut().zip(grads.iter()).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, p) in value.data_mut().iter_mut().enumerate() {
                let g = grad.data()[j] * cs;
                // Decoupled weight decay: shrink toward zero independently of
                // the moment estimates.
                *p = *p - wd * *p;
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let mhat = m[j] * inv_bias1;
                let vhat = v[j] * inv_bias2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
