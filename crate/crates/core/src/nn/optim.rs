//! AdamW with linear warmup and cosine decay.
//!
//! Updates walk parameters in name order (the collection's iteration
//! order), compute in 64-bit, and round back to the parameter precision,
//! so trajectories are bit-reproducible and checkpoints restore exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Params;
use super::{GradStore, NnError};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            warmup_steps: 500,
            total_steps: 1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: first/second moments per parameter plus the step count.
/// Moments are stored at parameter precision and keyed by parameter name.
pub struct AdamW<S> {
    pub cfg: OptimConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<S>>,
    pub v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: OptimConfig) -> Self {
        assert!(cfg.total_steps >= 1, "total_steps must be positive");
        AdamW { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Learning rate at 1-based step `k`: base * min(k/warmup, 1) *
    /// 0.5(1 + cos(pi * k/total)), with k clamped to the horizon.
    pub fn lr_at(&self, k: u64) -> f64 {
        let k_eff = k.min(self.cfg.total_steps) as f64;
        let warm = if self.cfg.warmup_steps == 0 {
            1.0
        } else {
            (k as f64 / self.cfg.warmup_steps as f64).min(1.0)
        };
        let cosine =
            0.5 * (1.0 + (std::f64::consts::PI * k_eff / self.cfg.total_steps as f64).cos());
        self.cfg.base_lr * warm * cosine
    }

    /// One update over all parameters. Missing gradients count as zero (the
    /// parameter's moments still decay and weight decay still applies).
    /// Returns the learning rate that was used.
    pub fn apply(&mut self, params: &mut Params<S>, grads: &GradStore<S>) -> Result<f64, NnError> {
        let k = self.step + 1;
        let lr = self.lr_at(k);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(k as i32);
        let bc2 = 1.0 - b2.powi(k as i32);
        for (name, p) in params.iter_mut() {
            let n = p.value.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
            if m.len() != n || grads.get(name).is_some_and(|g| g.len() != n) {
                return Err(NnError::ShapeMismatch(format!("optimizer state for {name}")));
            }
            let g = grads.get(name);
            let wd = if p.decay { self.cfg.weight_decay } else { 0.0 };
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i].to64());
                let mi = b1 * m[i].to64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].to64() + (1.0 - b2) * gi * gi;
                m[i] = S::fp(mi);
                v[i] = S::fp(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.cfg.eps);
                let x = p.value.data[i].to64();
                let next = x - lr * update - lr * wd * x;
                if !next.is_finite() {
                    return Err(NnError::NumericalDivergence(format!("update of {name}[{i}]")));
                }
                p.value.data[i] = S::fp(next);
            }
        }
        self.step = k;
        Ok(lr)
    }
}
