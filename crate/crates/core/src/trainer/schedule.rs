use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub context: usize,
    pub lr_max: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub snapshot_every: usize,
    /// Smoothing factor of the logged train loss.
    pub ema: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 64,
            context: 256,
            lr_max: 3e-4,
            warmup: 300,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            eval_every: 100,
            eval_batches: 200,
            snapshot_every: 100,
            ema: 0.99,
            seed: 1337,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("batch", self.batch),
            ("context", self.context),
            ("eval_every", self.eval_every),
            ("eval_batches", self.eval_batches),
            ("snapshot_every", self.snapshot_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        if self.warmup >= self.steps {
            return Err(Error::contract(format!(
                "warmup {} must be shorter than the run ({} steps)",
                self.warmup, self.steps
            )));
        }
        if !(self.lr_max > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::contract("lr_max, clip_norm and eps must be positive, weight_decay non-negative"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && (0.0..1.0).contains(&self.ema)) {
            return Err(Error::contract("betas and ema must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_max`, then a cosine down to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.steps);
    if step <= cfg.warmup {
        if cfg.warmup == 0 {
            return cfg.lr_max;
        }
        return cfg.lr_max * step as f64 / cfg.warmup as f64;
    }
    let progress = (step - cfg.warmup) as f64 / (cfg.steps - cfg.warmup) as f64;
    0.5 * cfg.lr_max * (1.0 + (std::f64::consts::PI * progress).cos())
}
