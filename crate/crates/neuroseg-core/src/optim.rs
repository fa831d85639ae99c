//! Adam optimizer with decoupled slot state per parameter.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is legal: the update is exactly zero and parameters keep
        // their bit patterns, which the training contract relies on.
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(CoreError::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CoreError::config(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(CoreError::config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.weight_decay < 0.0 {
            return Err(CoreError::config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update on raw slices. `t` is the 1-based step
/// count. Exposed separately so the update rule can be tested without the
/// parameter plumbing.
pub fn adam_update<T: Scalar>(
    value: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != value.len() || m.len() != value.len() || v.len() != value.len() {
        return Err(CoreError::config(format!(
            "adam buffers disagree: value {}, grad {}, m {}, v {}",
            value.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(CoreError::config("adam step count starts at 1"));
    }
    let b1: T = lit(cfg.beta1);
    let b2: T = lit(cfg.beta2);
    let lr: T = lit(cfg.lr);
    let eps: T = lit(cfg.eps);
    let wd: T = lit(cfg.weight_decay);
    let one = T::one();
    // 1 - beta^t, computed in f64 to keep long runs accurate.
    let c1: T = lit(1.0 - num_traits::Float::powi(cfg.beta1, t as i32));
    let c2: T = lit(1.0 - num_traits::Float::powi(cfg.beta2, t as i32));

    for i in 0..value.len() {
        let g = grad[i] + wd * value[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        value[i] = value[i] - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

struct Slot<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Optimizer over an ordered parameter walk. Callers must present the same
/// parameters in the same order on every step; slots are matched by
/// position.
pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Slot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam { cfg, step: 0, slots: Vec::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter the walker yields. Each
    /// parameter must carry an accumulated gradient; gradients are
    /// consumed (cleared) by the update.
    pub fn step_with(
        &mut self,
        walk: impl FnOnce(&mut dyn FnMut(&mut Tensor<T>) -> Result<()>) -> Result<()>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let cfg = self.cfg;
        let slots = &mut self.slots;
        let mut index = 0usize;
        walk(&mut |param: &mut Tensor<T>| {
            let grad = param
                .grad()
                .ok_or_else(|| CoreError::config("parameter has no gradient to apply"))?;
            if index == slots.len() {
                slots.push(Slot {
                    m: alloc::vec![T::zero(); param.len()],
                    v: alloc::vec![T::zero(); param.len()],
                });
            }
            let slot = slots.get_mut(index).ok_or_else(|| {
                CoreError::config("parameter walk yielded more entries than before")
            })?;
            if slot.m.len() != param.len() {
                return Err(CoreError::config(format!(
                    "parameter {index} changed size: {} vs {}",
                    param.len(),
                    slot.m.len()
                )));
            }
            let mut value = param.to_vec();
            adam_update(&mut value, &grad, &mut slot.m, &mut slot.v, t, &cfg)?;
            let updated = Tensor::parameter(param.shape(), value)?;
            *param = updated;
            index += 1;
            Ok(())
        })
    }
}
