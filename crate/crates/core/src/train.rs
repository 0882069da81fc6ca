//! Optimizer wiring shared by the tokenizer and autoregressive trainers.

use kline_tensor::{clip_grad_norm, cosine_schedule, AdamState, AdamW, ParamSet, Tensor};

use crate::{Error, Result};

/// Warm-up length used for full-scale pre-training.
pub const PRETRAIN_WARMUP_STEPS: usize = 15_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            peak_lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 0,
            clip_norm: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("optim.peak_lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optim.beta", "betas must lie in [0, 1)"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("optim.clip_norm", "must be positive"));
        }
        Ok(())
    }
}

/// Schedule, batch size and seed for a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("train", "steps and batch_size must be positive"));
        }
        self.optim.validate()
    }
}

/// AdamW plus warm-up/cosine schedule and optional clipping.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimConfig,
    adam: AdamW,
    state: AdamState,
    total_steps: usize,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, params: &ParamSet, total_steps: usize) -> Self {
        Optimizer {
            cfg,
            adam: AdamW {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                weight_decay: cfg.weight_decay,
                ..AdamW::default()
            },
            state: AdamState::new(params),
            total_steps,
        }
    }

    /// Applies one update for 0-based `step` and returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamSet, mut grads: Vec<Tensor>, step: usize) -> f64 {
        if let Some(c) = self.cfg.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        let lr = cosine_schedule(step, self.cfg.warmup_steps, self.total_steps, self.cfg.peak_lr);
        self.adam.step(params, &grads, &mut self.state, lr);
        lr
    }
}
