//! SGD with momentum plus the warmup/cosine learning-rate schedule.

use crate::error::{PadError, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Float;

/// Optimizer state: hyperparameters, step counter, and per-parameter
/// velocity buffers. Buffers are allocated lazily and only when momentum is
/// nonzero.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub momentum: Float,
    pub weight_decay: Float,
    pub step: usize,
    velocity: Vec<Option<Vec<Float>>>,
}

impl OptimState {
    pub fn new(momentum: Float, weight_decay: Float) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(PadError::InvalidArgument(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(PadError::InvalidArgument(format!("weight decay must be finite and non-negative, got {weight_decay}")));
        }
        Ok(OptimState { momentum, weight_decay, step: 0, velocity: Vec::new() })
    }

    /// One SGD step. Weight decay enters the velocity together with the raw
    /// gradient:
    ///
    /// ```text
    /// v ← momentum · v + grad + weight_decay · param
    /// param ← param − lr · v
    /// ```
    ///
    /// Any non-finite gradient rejects the whole step before a single
    /// parameter moves. Positions with an update mask of `0.0` are left
    /// untouched, velocity included.
    pub fn sgd_step(&mut self, params: &mut ParamSet, grads: &[(ParamId, &[Float])], lr: Float) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(PadError::InvalidArgument(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        for (id, grad) in grads {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(PadError::NonFiniteGradient { param: params.name(*id).to_string() });
            }
            if grad.len() != params.get(*id).numel() {
                return Err(PadError::ShapeMismatch {
                    op: "sgd_step",
                    detail: format!("gradient length {} vs parameter `{}`", grad.len(), params.name(*id)),
                });
            }
        }
        for (id, grad) in grads {
            self.apply_one(params, *id, grad, lr);
        }
        self.step += 1;
        Ok(())
    }

    fn apply_one(&mut self, params: &mut ParamSet, id: ParamId, grad: &[Float], lr: Float) {
        let idx = id.index();
        if self.velocity.len() <= idx {
            self.velocity.resize(idx + 1, None);
        }
        let momentum = self.momentum;
        let wd = self.weight_decay;
        let mask = params.update_mask(id).map(|m| m.to_vec());
        let value = params.get_mut(id).data_mut();

        let trainable = |j: usize| mask.as_ref().map_or(true, |m| m[j] != 0.0);

        if momentum > 0.0 {
            let vel = self.velocity[idx].get_or_insert_with(|| vec![0.0; value.len()]);
            for j in 0..value.len() {
                if !trainable(j) {
                    continue;
                }
                vel[j] = momentum * vel[j] + grad[j] + wd * value[j];
                value[j] -= lr * vel[j];
            }
        } else {
            for j in 0..value.len() {
                if !trainable(j) {
                    continue;
                }
                value[j] -= lr * (grad[j] + wd * value[j]);
            }
        }
    }

    /// Drop the velocity buffer of one parameter (used when a partition
    /// event rewrites its trainability, or compaction reshapes it).
    pub fn reset_velocity(&mut self, id: ParamId) {
        if let Some(slot) = self.velocity.get_mut(id.index()) {
            *slot = None;
        }
    }

    /// True if a velocity buffer is currently allocated for `id`.
    pub fn has_velocity(&self, id: ParamId) -> bool {
        self.velocity.get(id.index()).map_or(false, Option::is_some)
    }
}

/// Linear warmup from zero into a cosine decay that lands exactly on zero at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub max_lr: Float,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(max_lr: Float, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if !(max_lr > 0.0) || !max_lr.is_finite() {
            return Err(PadError::InvalidArgument(format!("max_lr must be positive and finite, got {max_lr}")));
        }
        if total_steps == 0 || warmup_steps > total_steps {
            return Err(PadError::InvalidArgument(format!(
                "schedule needs 0 < total_steps and warmup_steps ≤ total_steps, got warmup {warmup_steps}, total {total_steps}"
            )));
        }
        Ok(LrSchedule { max_lr, warmup_steps, total_steps })
    }

    /// Learning rate at `step ∈ [0, total_steps]`.
    pub fn lr_at(&self, step: usize) -> Result<Float> {
        if step > self.total_steps {
            return Err(PadError::InvalidArgument(format!("step {step} past schedule end {}", self.total_steps)));
        }
        if step < self.warmup_steps {
            return Ok(self.max_lr * step as Float / self.warmup_steps as Float);
        }
        let span = (self.total_steps - self.warmup_steps) as Float;
        if span == 0.0 {
            return Ok(if step == self.total_steps { 0.0 } else { self.max_lr });
        }
        let t = (step - self.warmup_steps) as Float / span;
        Ok(self.max_lr * 0.5 * (1.0 + (std::f64::consts::PI as Float * t).cos()))
    }
}
