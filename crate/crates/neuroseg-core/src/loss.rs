//! Segmentation losses: stable binary cross entropy, a soft-skeleton
//! overlap loss for tubular structures, and the progress-scheduled blend
//! of the two.
//!
//! The skeleton loss compares morphological centerlines instead of full
//! masks, so thin structures are weighted by their topology rather than
//! their (tiny) volume. Skeletons are extracted with iterated min/max
//! pooling, which keeps the whole construction differentiable.

use alloc::format;

use crate::error::{CoreError, Result};
use crate::ops;
use crate::tensor::{shape_string, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Plain voxelwise cross entropy.
    CrossEntropyOnly,
    /// Scheduled blend of cross entropy and skeleton loss.
    Compound,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Laplace smoothing added to every overlap sum.
    pub delta: f64,
    /// Erosion rounds in the soft skeleton; bounds the tube radius that
    /// still gets thinned.
    pub skeleton_iters: usize,
    /// Epoch count the first schedule branch normalizes against.
    pub schedule_epoch_knee: usize,
    /// Epoch count the second branch normalizes against once training
    /// passes the knee.
    pub schedule_epoch_cap: usize,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            delta: 1.0,
            skeleton_iters: 5,
            schedule_epoch_knee: 200,
            schedule_epoch_cap: 300,
            mode: LossMode::Compound,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(CoreError::config(format!("delta must be positive, got {}", self.delta)));
        }
        if self.schedule_epoch_knee == 0 || self.schedule_epoch_cap == 0 {
            return Err(CoreError::config("schedule epoch constants must be positive"));
        }
        Ok(())
    }
}

/// Position within a training run, in iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub current_iteration: u64,
    pub total_iterations: u64,
    pub epochs_planned: u64,
}

impl Progress {
    pub fn validate(&self) -> Result<()> {
        if self.total_iterations == 0 {
            return Err(CoreError::config("total_iterations must be positive"));
        }
        if self.epochs_planned == 0 {
            return Err(CoreError::config("epochs_planned must be positive"));
        }
        if self.current_iteration > self.total_iterations {
            return Err(CoreError::config(format!(
                "current iteration {} exceeds total {}",
                self.current_iteration, self.total_iterations
            )));
        }
        Ok(())
    }
}

/// Training-progress ratio driving the loss blend.
///
/// While the current epoch is below the knee, progress is measured against
/// a knee-length run; past the knee it doubles and is measured against a
/// cap-length run. With the defaults (knee 200, cap 300) the ratio reaches
/// 1 at epoch 200 and 2 at epoch 300.
pub fn progress_ratio(pr: &Progress, cfg: &LossConfig) -> Result<f64> {
    pr.validate()?;
    cfg.validate()?;
    let per_epoch = pr.total_iterations as f64 / pr.epochs_planned as f64;
    let current = pr.current_iteration as f64;
    let epoch = current / per_epoch;
    if epoch < cfg.schedule_epoch_knee as f64 {
        Ok(current / (cfg.schedule_epoch_knee as f64 * per_epoch))
    } else {
        Ok(2.0 * current / (cfg.schedule_epoch_cap as f64 * per_epoch))
    }
}

/// Blend weight `2 / (1 + e^(-10 p)) - 1`, identically `tanh(5 p)`.
pub fn alpha(p: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

fn ensure_rank5<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.shape().len() != 5 {
        return Err(CoreError::shape(
            op,
            format!("expected [B, C, D, H, W], got {}", shape_string(t.shape())),
        ));
    }
    Ok(())
}

fn ensure_probability_range<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    let lo: T = crate::tensor::lit(-1e-6);
    let hi: T = crate::tensor::lit(1.0 + 1e-6);
    if t.data().iter().any(|&v| v < lo || v > hi) {
        return Err(CoreError::data(format!("{op}: values must lie in [0, 1]")));
    }
    Ok(())
}

fn ensure_binary<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(CoreError::data(format!("{op}: labels must be exactly 0 or 1")));
    }
    Ok(())
}

fn soft_erode<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ops::pool3d(x, ops::PoolMode::Min, 3, 1, 1)
}

fn soft_dilate<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ops::pool3d(x, ops::PoolMode::Max, 3, 1, 1)
}

fn soft_open<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    soft_dilate(&soft_erode(x)?)
}

/// Differentiable morphological skeleton.
///
/// Each round erodes the volume and adds the newly exposed ridge
/// `relu(d - skel*d)` to the running skeleton, where `d` is the opening
/// residue of the eroded volume. For binary input this reproduces the
/// hard morphological skeleton; for probabilities it is a soft relaxation
/// whose values stay in [0, 1].
pub fn soft_skeleton<T: Scalar>(prob: &Tensor<T>, iters: usize) -> Result<Tensor<T>> {
    ensure_rank5("soft_skeleton", prob)?;
    ensure_probability_range("soft_skeleton", prob)?;

    let mut x = prob.clone();
    let mut skel = ops::relu(&ops::sub(&x, &soft_open(&x)?)?)?;
    for _ in 0..iters {
        x = soft_erode(&x)?;
        let d = ops::relu(&ops::sub(&x, &soft_open(&x)?)?)?;
        let gain = ops::relu(&ops::sub(&d, &ops::mul(&skel, &d)?)?)?;
        skel = ops::add(&skel, &gain)?;
    }
    Ok(skel)
}

/// Per-item skeleton overlap loss, averaged over the batch.
///
/// With skeleton sums `sp`, `sl` and overlap `i` for one item:
/// `precision = (i + delta) / (sp + delta)`,
/// `recall = (i + delta) / (sl + delta)`, and the loss is one minus their
/// harmonic mean. The smoothing keeps both ratios positive, so the result
/// always lands in [0, 1).
pub fn skeleton_loss<T: Scalar>(
    pred_prob: &Tensor<T>,
    label: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if pred_prob.shape() != label.shape() {
        return Err(CoreError::shape(
            "skeleton_loss",
            format!(
                "prediction {} and label {} differ",
                shape_string(pred_prob.shape()),
                shape_string(label.shape())
            ),
        ));
    }
    ensure_binary("skeleton_loss", label)?;

    let skel_p = soft_skeleton(pred_prob, cfg.skeleton_iters)?;
    let skel_l = soft_skeleton(label, cfg.skeleton_iters)?;
    let overlap = ops::mul(&skel_p, &skel_l)?;

    let batch = pred_prob.shape()[0];
    let mut total: Option<Tensor<T>> = None;
    for b in 0..batch {
        let sp = ops::sum_all(&ops::select_batch(&skel_p, b)?)?;
        let sl = ops::sum_all(&ops::select_batch(&skel_l, b)?)?;
        let i = ops::sum_all(&ops::select_batch(&overlap, b)?)?;

        let i_s = ops::add_scalar(&i, cfg.delta)?;
        let precision = ops::div(&i_s, &ops::add_scalar(&sp, cfg.delta)?)?;
        let recall = ops::div(&i_s, &ops::add_scalar(&sl, cfg.delta)?)?;
        let f = ops::div(
            &ops::scale(&ops::mul(&precision, &recall)?, 2.0)?,
            &ops::add(&precision, &recall)?,
        )?;
        let item = ops::add_scalar(&ops::scale(&f, -1.0)?, 1.0)?;
        total = Some(match total {
            Some(acc) => ops::add(&acc, &item)?,
            None => item,
        });
    }
    let total = total.ok_or_else(|| CoreError::config("skeleton_loss needs a non-empty batch"))?;
    ops::scale(&total, 1.0 / batch as f64)
}

/// Mean binary cross entropy from logits.
///
/// Uses `max(z, 0) - z*y + ln(1 + e^(-|z|))` per voxel, which never
/// overflows and stays accurate for extreme logits.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, label: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape() != label.shape() {
        return Err(CoreError::shape(
            "bce_loss",
            format!(
                "logits {} and label {} differ",
                shape_string(logits.shape()),
                shape_string(label.shape())
            ),
        ));
    }
    ensure_binary("bce_loss", label)?;
    let n = logits.len();
    if n == 0 {
        return Err(CoreError::config("bce_loss needs a non-empty tensor"));
    }

    let inv_n: T = T::one() / crate::tensor::lit(n as f64);
    let zero = T::zero();
    let mut acc = T::zero();
    for (&z, &y) in logits.data().iter().zip(label.data()) {
        let term = z.max(zero) - z * y + (-z.abs()).exp().ln_1p();
        acc += term;
    }
    let value = acc * inv_n;

    let (lc, tc) = (logits.clone(), label.clone());
    Tensor::from_op(
        "bce_loss",
        alloc::vec![1],
        alloc::vec![value],
        alloc::vec![logits.clone(), label.clone()],
        move |g| {
            let dz = lc.requires_grad().then(|| {
                let scale = g[0] * inv_n;
                lc.data()
                    .iter()
                    .zip(tc.data())
                    .map(|(&z, &y)| {
                        let s = if z >= T::zero() {
                            T::one() / (T::one() + (-z).exp())
                        } else {
                            let e = z.exp();
                            e / (T::one() + e)
                        };
                        scale * (s - y)
                    })
                    .collect()
            });
            alloc::vec![dz, None]
        },
    )
}

/// Scalar terms of one loss evaluation, alongside the differentiable
/// total.
#[derive(Debug)]
pub struct LossTerms<T: Scalar> {
    pub loss: Tensor<T>,
    pub alpha: f64,
    pub bce: f64,
    pub skeleton: Option<f64>,
}

/// Progress-scheduled compound loss `alpha*bce + (1-alpha)*skeleton`.
///
/// Early in training (p near 0) the skeleton term dominates; the blend
/// moves to cross entropy as p grows. Requires compound mode.
pub fn compound_loss<T: Scalar>(
    logits: &Tensor<T>,
    label: &Tensor<T>,
    pr: &Progress,
    cfg: &LossConfig,
) -> Result<LossTerms<T>> {
    if cfg.mode != LossMode::Compound {
        return Err(CoreError::config("compound_loss requires compound mode"));
    }
    let p = progress_ratio(pr, cfg)?;
    let a = alpha(p);

    let bce = bce_loss(logits, label)?;
    let prob = ops::sigmoid(logits)?;
    let skl = skeleton_loss(&prob, label, cfg)?;
    let loss = ops::add(&ops::scale(&bce, a)?, &ops::scale(&skl, 1.0 - a)?)?;
    Ok(LossTerms {
        loss,
        alpha: a,
        bce: bce.item().map(|v| v.to_f64().unwrap_or(f64::NAN))?,
        skeleton: Some(skl.item().map(|v| v.to_f64().unwrap_or(f64::NAN))?),
    })
}
