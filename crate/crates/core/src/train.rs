//! Optimizer plumbing shared by every training stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::optim::{AdamWConfig, AdamWState, LrSchedule};
use crate::tensor::{Float, Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHparams {
    pub min_lr: Float,
    pub max_lr: Float,
    pub warmup_steps: u64,
    /// Global-norm clip; 0 disables.
    pub grad_clip: Float,
    pub weight_decay: Float,
    pub beta1: Float,
    pub beta2: Float,
}

impl Default for TrainHparams {
    fn default() -> Self {
        Self { min_lr: 1e-3, max_lr: 3e-3, warmup_steps: 10, grad_clip: 1.0, weight_decay: 0.0, beta1: 0.9, beta2: 0.95 }
    }
}

impl TrainHparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.max_lr >= self.min_lr) {
            return Err(Error::invalid(format!("need 0 < min_lr <= max_lr, got {} / {}", self.min_lr, self.max_lr)));
        }
        if !(self.grad_clip >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("grad_clip and weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn schedule(&self, total_steps: u64) -> LrSchedule {
        LrSchedule {
            min_lr: self.min_lr,
            max_lr: self.max_lr,
            warmup_steps: self.warmup_steps.min(total_steps / 2),
            total_steps,
        }
    }

    pub fn adamw(&self, lr: Float) -> AdamWConfig {
        AdamWConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: Float,
    pub lr: Float,
    pub grad_norm: Float,
    pub tokens: u64,
}

/// Clips and applies one update, refusing non-finite losses or gradients so
/// the parameters always hold the last good state.
pub fn apply_update(
    params: &mut ParamStore,
    opt: &mut AdamWState,
    grads: &mut Gradients,
    loss: Float,
    lr: Float,
    hp: &TrainHparams,
) -> Result<Float> {
    if !loss.is_finite() {
        return Err(Error::TrainingAborted { step: opt.step + 1, reason: format!("loss is {loss}") });
    }
    if !grads.is_finite() {
        return Err(Error::TrainingAborted { step: opt.step + 1, reason: "non-finite gradient".into() });
    }
    let norm = grads.clip(hp.grad_clip);
    opt.step(params, grads, &hp.adamw(lr))?;
    Ok(norm)
}
