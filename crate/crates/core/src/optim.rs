//! SGD with momentum, weight decay, and a cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 penalty on backbone parameters (classifier columns are scale-free).
    pub weight_decay: f64,
    /// Floor of the cosine schedule, as a fraction of `learning_rate`.
    pub min_lr_fraction: f64,
    /// Epochs of linear warmup at the start of each training stage.
    pub warmup_epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            min_lr_fraction: 0.0,
            warmup_epochs: 3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("protocol.optimizer.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("protocol.optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("protocol.optimizer.weight_decay", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return Err(Error::config("protocol.optimizer.min_lr_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total`: linear ramp over the first `warmup`
/// steps, cosine decay over the rest.
pub fn cosine_lr(cfg: &OptimizerConfig, step: usize, total: usize, warmup: usize) -> f64 {
    let warmup = warmup.min(total.saturating_sub(1));
    if step < warmup {
        return cfg.learning_rate * (step + 1) as f64 / (warmup + 1) as f64;
    }
    let (step, total) = (step - warmup, total - warmup);
    let lo = cfg.learning_rate * cfg.min_lr_fraction;
    if total <= 1 {
        return cfg.learning_rate;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    lo + 0.5 * (cfg.learning_rate - lo) * (1.0 + (PI * t).cos())
}

/// Heavy-ball SGD over one flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<f64>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(len: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: vec![0.0; len],
            momentum,
            weight_decay,
        }
    }

    /// `v ← μ v + (g + wd·p)`, `p ← p − lr·v`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.velocity.len(), "parameter count changed");
        assert_eq!(grads.len(), self.velocity.len(), "gradient count");
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            min_lr_fraction: 0.1,
            ..OptimizerConfig::default()
        };
        assert!((cosine_lr(&cfg, 0, 11, 0) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(&cfg, 10, 11, 0) - 0.01).abs() < 1e-15);
        assert!((cosine_lr(&cfg, 5, 11, 0) - 0.055).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_then_decays() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            ..OptimizerConfig::default()
        };
        assert!((cosine_lr(&cfg, 0, 14, 3) - 0.025).abs() < 1e-15);
        assert!((cosine_lr(&cfg, 2, 14, 3) - 0.075).abs() < 1e-15);
        assert!((cosine_lr(&cfg, 3, 14, 3) - 0.1).abs() < 1e-15);
        assert!(cosine_lr(&cfg, 13, 14, 3).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = Sgd::new(1, 0.5, 0.0);
        let mut p = [1.0];
        opt.step(&mut p, &[1.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-15);
        opt.step(&mut p, &[1.0], 0.1);
        assert!((p[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn quadratic_converges() {
        let mut opt = Sgd::new(2, 0.9, 0.0);
        let mut p = [3.0, -2.0];
        for _ in 0..300 {
            let g = [2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g, 0.05);
        }
        assert!(p[0].abs() < 1e-6 && p[1].abs() < 1e-6);
    }
}
