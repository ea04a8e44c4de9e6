//! NELBO objective, optimizer, learning-rate schedule, training loop and
//! checkpointing.

mod checkpoint;
mod loss;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, MAGIC, VERSION};
pub use loss::{
    batch_loss, batch_loss_and_grad, example_loss, example_loss_and_grad, masked_cross_entropy,
    nelbo_loss, CorruptedExample, LossOutput,
};
pub use optim::{adamw_update, clip_grad_norm, AdamState};
pub use trainer::{train_step, train_step_from_source, train_until, StepReport, TrainState};
pub(crate) use loss::pairwise_sum;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub cycle_length: u64,
    pub min_lr_fraction: f64,
    /// Global L2 norm the gradient is clipped to.
    pub grad_clip: f64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            total_steps: 2000,
            seed: 0,
            base_lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 100,
            cycle_length: 2000,
            min_lr_fraction: 0.05,
            grad_clip: 1.0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if self.warmup_steps >= self.cycle_length {
            return bad("warmup_steps must be smaller than cycle_length");
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return bad("min_lr_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        Ok(())
    }
}

/// Warmup + cosine annealing with warm restarts. Within each cycle the rate
/// ramps linearly from 0 to `base_lr` over `warmup_steps`, then follows a
/// half cosine down to `base_lr * min_lr_fraction`.
pub fn lr_at(config: &TrainConfig, step: u64) -> f64 {
    let pos = step % config.cycle_length;
    if pos < config.warmup_steps {
        return config.base_lr * pos as f64 / config.warmup_steps as f64;
    }
    let span = (config.cycle_length - config.warmup_steps) as f64;
    let progress = (pos - config.warmup_steps) as f64 / span;
    let min_lr = config.base_lr * config.min_lr_fraction;
    min_lr + (config.base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
