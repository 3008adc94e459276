//! Optimization: Adam, the warmup-then-decay learning-rate schedule, the
//! checkpoint container, and a generic training loop with periodic
//! validation and early stopping.

mod checkpoint;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{adam_step, Adam, AdamConfig};
pub use trainer::{
    epoch_batches, write_loss_log, LossRecord, RunStatus, TrainState, TrainTask, Trainer, ValRecord,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What one decay period of the learning-rate schedule is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayUnit {
    Epoch,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub decay_gamma: f64,
    pub decay_unit: DecayUnit,
    pub max_epochs: usize,
    pub validate_every: u64,
    pub lambda_audio: f64,
    pub lambda_text: f64,
    /// Validations without an improvement of at least `min_delta` before
    /// training stops.
    pub patience: usize,
    pub min_delta: f64,
    /// Hard cap on optimizer steps, if any.
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Full-scale values.
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            warmup_steps: 1000,
            decay_gamma: 0.85,
            decay_unit: DecayUnit::Epoch,
            max_epochs: 4,
            validate_every: 3000,
            lambda_audio: 1.0,
            lambda_text: 1.0,
            patience: 3,
            min_delta: 1e-4,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale values: shorter warmup and more frequent validation.
    pub fn desk() -> Self {
        Self {
            warmup_steps: 50,
            validate_every: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.batch_size > 0
            && self.decay_gamma > 0.0
            && self.decay_gamma <= 1.0
            && self.max_epochs > 0
            && self.validate_every > 0
            && self.lambda_audio >= 0.0
            && self.lambda_text >= 0.0
            && self.min_delta >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration: {self:?}")))
        }
    }
}

/// Learning rate for optimizer step `step` (1-based; step 0 gives 0).
///
/// Linear warmup to `cfg.lr` over `cfg.warmup_steps`, then multiplied by
/// `decay_gamma` once per elapsed decay period after warmup.
pub fn lr_schedule(step: u64, periods_after_warmup: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    cfg.lr * cfg.decay_gamma.powi(periods_after_warmup.min(i32::MAX as u64) as i32)
}
