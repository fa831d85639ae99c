//! Batch normalization over the channel axis.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{CoreError, Result};
use crate::ops;
use crate::tensor::{lit, shape_string, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Per-channel running mean and variance, updated on training forward
/// passes and read during inference. Interior mutability keeps the
/// operator signature by-reference; this type is not thread-safe.
#[derive(Debug)]
pub struct RunningStats<T: Scalar> {
    mean: RefCell<Vec<T>>,
    var: RefCell<Vec<T>>,
}

impl<T: Scalar> RunningStats<T> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: RefCell::new(vec![T::zero(); channels]),
            var: RefCell::new(vec![T::one(); channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.borrow().len()
    }

    pub fn mean(&self) -> Vec<T> {
        self.mean.borrow().clone()
    }

    pub fn var(&self) -> Vec<T> {
        self.var.borrow().clone()
    }

    pub fn set(&self, mean: &[T], var: &[T]) -> Result<()> {
        let c = self.channels();
        if mean.len() != c || var.len() != c {
            return Err(CoreError::config(format!(
                "running stats expect {c} channels, got {} and {}",
                mean.len(),
                var.len()
            )));
        }
        if mean.iter().chain(var.iter()).any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { op: "running_stats" });
        }
        self.mean.borrow_mut().copy_from_slice(mean);
        self.var.borrow_mut().copy_from_slice(var);
        Ok(())
    }
}

/// Batch normalization of `[B, C, D, H, W]` with affine parameters
/// `gamma, beta: [C]`.
///
/// Training mode normalizes with the population statistics of the current
/// batch (denominator `m`, not `m - 1`) and folds them into `running` with
/// `r <- (1 - momentum) * r + momentum * batch`. Inference mode normalizes
/// with `running` and leaves it untouched.
pub fn batchnorm3d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    momentum: f64,
    phase: Phase,
    running: &RunningStats<T>,
) -> Result<Tensor<T>> {
    if x.shape().len() != 5 {
        return Err(CoreError::shape(
            "batchnorm3d",
            format!("expected [B, C, D, H, W], got {}", shape_string(x.shape())),
        ));
    }
    let chans = x.shape()[1];
    if gamma.shape() != [chans] || beta.shape() != [chans] {
        return Err(CoreError::shape(
            "batchnorm3d",
            format!(
                "gamma/beta must be [{chans}], got {} and {}",
                shape_string(gamma.shape()),
                shape_string(beta.shape())
            ),
        ));
    }
    if running.channels() != chans {
        return Err(CoreError::config(format!(
            "running stats cover {} channels, input has {chans}",
            running.channels()
        )));
    }
    if !(eps > 0.0) {
        return Err(CoreError::config(format!("batchnorm eps must be positive, got {eps}")));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(CoreError::config(format!(
            "batchnorm momentum must lie in [0, 1], got {momentum}"
        )));
    }
    let batch = x.shape()[0];
    let spatial: usize = x.shape()[2..].iter().product();
    let m = batch * spatial;
    if m == 0 {
        return Err(CoreError::config("batchnorm group is empty"));
    }

    let (mean, var) = match phase {
        Phase::Train => {
            let xd = x.data();
            let inv_m = T::one() / lit::<T>(m as f64);
            let mut mean = vec![T::zero(); chans];
            let mut var = vec![T::zero(); chans];
            for c in 0..chans {
                let mut acc = T::zero();
                for b in 0..batch {
                    let base = (b * chans + c) * spatial;
                    for &v in &xd[base..base + spatial] {
                        acc += v;
                    }
                }
                let mu = acc * inv_m;
                let mut sq = T::zero();
                for b in 0..batch {
                    let base = (b * chans + c) * spatial;
                    for &v in &xd[base..base + spatial] {
                        let d = v - mu;
                        sq += d * d;
                    }
                }
                mean[c] = mu;
                var[c] = sq * inv_m;
            }

            let mom: T = lit(momentum);
            let keep = T::one() - mom;
            {
                let mut rm = running.mean.borrow_mut();
                let mut rv = running.var.borrow_mut();
                for c in 0..chans {
                    rm[c] = keep * rm[c] + mom * mean[c];
                    rv[c] = keep * rv[c] + mom * var[c];
                }
            }
            (mean, var)
        }
        Phase::Infer => (running.mean(), running.var()),
    };

    let epsilon: T = lit(eps);
    let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();

    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut data = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..chans {
            let base = (b * chans + c) * spatial;
            let (mu, is, ga, be) = (mean[c], invstd[c], gd[c], bd[c]);
            for i in base..base + spatial {
                let h = (xd[i] - mu) * is;
                xhat[i] = h;
                data[i] = ga * h + be;
            }
        }
    }

    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    Tensor::from_op(
        "batchnorm3d",
        x.shape().to_vec(),
        data,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let gd = gc.data();
            // Per-channel sums of g and g*xhat; these double as the beta
            // and gamma gradients.
            let mut sg = vec![T::zero(); chans];
            let mut sgx = vec![T::zero(); chans];
            for b in 0..batch {
                for c in 0..chans {
                    let base = (b * chans + c) * spatial;
                    let (mut a0, mut a1) = (T::zero(), T::zero());
                    for i in base..base + spatial {
                        a0 += g[i];
                        a1 += g[i] * xhat[i];
                    }
                    sg[c] += a0;
                    sgx[c] += a1;
                }
            }

            let dx = xc.requires_grad().then(|| {
                let mut dx = vec![T::zero(); xc.len()];
                match phase {
                    Phase::Train => {
                        // Batch statistics depend on x, so the gradient
                        // carries mean and projection corrections:
                        // dx = gamma*invstd/m * (m*g - sum(g) - xhat*sum(g*xhat))
                        let mf: T = lit(m as f64);
                        let inv_m = T::one() / mf;
                        for c in 0..chans {
                            let k = gd[c] * invstd[c] * inv_m;
                            for b in 0..batch {
                                let base = (b * chans + c) * spatial;
                                for i in base..base + spatial {
                                    dx[i] = k * (mf * g[i] - sg[c] - xhat[i] * sgx[c]);
                                }
                            }
                        }
                    }
                    Phase::Infer => {
                        for c in 0..chans {
                            let k = gd[c] * invstd[c];
                            for b in 0..batch {
                                let base = (b * chans + c) * spatial;
                                for i in base..base + spatial {
                                    dx[i] = k * g[i];
                                }
                            }
                        }
                    }
                }
                dx
            });
            vec![
                dx,
                gc.requires_grad().then(|| sgx.clone()),
                bc.requires_grad().then(|| sg.clone()),
            ]
        },
    )
}

/// Batch norm over a `[S, C]` point set: each channel is normalized across
/// the S sites. Implemented by viewing the points as a `[1, C, S, 1, 1]`
/// volume so it shares `batchnorm3d`'s gradient and running-stat logic.
pub fn batchnorm_points<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    momentum: f64,
    phase: Phase,
    running: &RunningStats<T>,
) -> Result<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(CoreError::shape(
            "batchnorm_points",
            format!("expected [S, C], got {}", shape_string(x.shape())),
        ));
    }
    let (sites, chans) = (x.shape()[0], x.shape()[1]);
    let cols = ops::transpose2d(x)?;
    let grid = ops::reshape(&cols, &[1, chans, sites, 1, 1])?;
    let normed = batchnorm3d(&grid, gamma, beta, eps, momentum, phase, running)?;
    let flat = ops::reshape(&normed, &[chans, sites])?;
    ops::transpose2d(&flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_produces_zero_mean_unit_var() {
        let x = Tensor::from_vec(&[1, 1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let running = RunningStats::new(1);
        let y = batchnorm3d(&x, &gamma, &beta, 1e-12, 0.1, Phase::Train, &running).unwrap();
        let yd = y.data();
        let mean = yd.iter().sum::<f64>() / 4.0;
        let var = yd.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
        // Population variance of [1,2,3,4] is 1.25.
        assert!((running.mean()[0] - 0.25).abs() < 1e-12);
        assert!((running.var()[0] - (0.9 + 0.125)).abs() < 1e-12);
    }

    #[test]
    fn infer_mode_uses_running_stats_and_leaves_them_alone() {
        let x = Tensor::from_vec(&[1, 1, 1, 1, 2], vec![3.0_f64, 5.0]).unwrap();
        let gamma = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let running = RunningStats::new(1);
        running.set(&[3.0], &[4.0]).unwrap();
        let y = batchnorm3d(&x, &gamma, &beta, 1e-12, 0.1, Phase::Infer, &running).unwrap();
        // (x - 3) / 2 * 2 + 1
        assert!((y.data()[0] - 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 3.0).abs() < 1e-9);
        assert_eq!(running.mean()[0], 3.0);
        assert_eq!(running.var()[0], 4.0);
    }

    #[test]
    fn per_channel_groups_are_independent() {
        let x = Tensor::from_vec(
            &[2, 2, 1, 1, 2],
            vec![1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0],
        )
        .unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let running = RunningStats::new(2);
        let y = batchnorm3d(&x, &gamma, &beta, 1e-12, 0.5, Phase::Train, &running).unwrap();
        // Channel 0 holds {1,2,3,4}; channel 1 holds {10,20,30,40}.
        let m0 = 2.5_f64;
        let v0 = 1.25_f64;
        assert!((y.data()[0] - (1.0 - m0) / v0.sqrt()).abs() < 1e-9);
        assert!((running.mean()[1] - 12.5_f64).abs() < 1e-12);
    }

    #[test]
    fn empty_group_is_rejected() {
        let x = Tensor::<f64>::zeros(&[0, 1, 1, 1, 1]);
        let gamma = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let running = RunningStats::new(1);
        assert!(matches!(
            batchnorm3d(&x, &gamma, &beta, 1e-5, 0.1, Phase::Train, &running),
            Err(CoreError::Config { .. })
        ));
    }

    #[test]
    fn points_variant_matches_grid_variant() {
        let pts = Tensor::from_vec(&[3, 2], vec![1.0, 10.0, 2.0, 20.0, 6.0, 60.0]).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.0, -1.0]).unwrap();
        let r1 = RunningStats::new(2);
        let y = batchnorm_points(&pts, &gamma, &beta, 1e-5, 0.1, Phase::Train, &r1).unwrap();

        // Same data arranged as [1, 2, 3, 1, 1].
        let grid = Tensor::from_vec(&[1, 2, 3, 1, 1], vec![1.0, 2.0, 6.0, 10.0, 20.0, 60.0]).unwrap();
        let r2 = RunningStats::new(2);
        let yg = batchnorm3d(&grid, &gamma, &beta, 1e-5, 0.1, Phase::Train, &r2).unwrap();

        for s in 0..3 {
            for c in 0..2 {
                assert_eq!(y.data()[s * 2 + c], yg.data()[c * 3 + s]);
            }
        }
        assert_eq!(r1.mean(), r2.mean());
        assert_eq!(r1.var(), r2.var());
    }
}
