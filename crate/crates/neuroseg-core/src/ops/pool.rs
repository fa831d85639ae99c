//! Min and max pooling over cubic windows.

use alloc::format;
use alloc::vec;

use crate::error::{CoreError, Result};
use crate::tensor::{shape_string, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Min,
}

/// Cubic pooling with zero *exclusion* padding: padded positions never
/// win, they only extend the window grid. Ties resolve to the lowest
/// linear input index, which keeps gradients deterministic on plateaus.
///
/// `x: [B, C, D, H, W]`; output extent per axis is
/// `(e + 2*padding - kernel) / stride + 1`.
pub fn pool3d<T: Scalar>(
    x: &Tensor<T>,
    mode: PoolMode,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if x.shape().len() != 5 {
        return Err(CoreError::shape(
            "pool3d",
            format!("expected [B, C, D, H, W], got {}", shape_string(x.shape())),
        ));
    }
    if kernel == 0 || stride == 0 {
        return Err(CoreError::shape("pool3d", "kernel and stride must be positive"));
    }
    if padding >= kernel {
        return Err(CoreError::shape(
            "pool3d",
            format!("padding {padding} must be smaller than kernel {kernel} so every window sees data"),
        ));
    }
    let xs = x.shape();
    let (batch, chans) = (xs[0], xs[1]);
    let [d, h, w] = [xs[2], xs[3], xs[4]];
    let mut out_ext = [0usize; 3];
    for (o, &e) in out_ext.iter_mut().zip([d, h, w].iter()) {
        if e + 2 * padding < kernel {
            return Err(CoreError::shape(
                "pool3d",
                format!("extent {e} with padding {padding} is smaller than kernel {kernel}"),
            ));
        }
        *o = (e + 2 * padding - kernel) / stride + 1;
    }
    let [od, oh, ow] = out_ext;
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;

    let xd = x.data();
    let mut data = vec![T::zero(); batch * chans * out_vol];
    let mut argext = vec![0usize; batch * chans * out_vol];
    let pad = padding as i64;

    for bc in 0..batch * chans {
        let src = &xd[bc * in_vol..(bc + 1) * in_vol];
        for zo in 0..od {
            let z0 = zo as i64 * stride as i64 - pad;
            for yo in 0..oh {
                let y0 = yo as i64 * stride as i64 - pad;
                for xo in 0..ow {
                    let x0 = xo as i64 * stride as i64 - pad;
                    let mut best = T::nan();
                    let mut best_idx = usize::MAX;
                    for dz in 0..kernel as i64 {
                        let zi = z0 + dz;
                        if zi < 0 || zi >= d as i64 {
                            continue;
                        }
                        for dy in 0..kernel as i64 {
                            let yi = y0 + dy;
                            if yi < 0 || yi >= h as i64 {
                                continue;
                            }
                            let row = (zi as usize * h + yi as usize) * w;
                            for dx in 0..kernel as i64 {
                                let xi = x0 + dx;
                                if xi < 0 || xi >= w as i64 {
                                    continue;
                                }
                                let idx = row + xi as usize;
                                let v = src[idx];
                                let wins = if best_idx == usize::MAX {
                                    true
                                } else {
                                    match mode {
                                        PoolMode::Max => v > best,
                                        PoolMode::Min => v < best,
                                    }
                                };
                                if wins {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    debug_assert_ne!(best_idx, usize::MAX);
                    let o = (zo * oh + yo) * ow + xo;
                    data[bc * out_vol + o] = best;
                    argext[bc * out_vol + o] = best_idx;
                }
            }
        }
    }

    let nx = x.requires_grad();
    let total_in = x.len();
    Tensor::from_op(
        "pool3d",
        vec![batch, chans, od, oh, ow],
        data,
        vec![x.clone()],
        move |g| {
            vec![nx.then(|| {
                let mut dx = vec![T::zero(); total_in];
                for bc in 0..batch * chans {
                    let base_in = bc * in_vol;
                    let base_out = bc * out_vol;
                    for o in 0..out_vol {
                        dx[base_in + argext[base_out + o]] += g[base_out + o];
                    }
                }
                dx
            })]
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(data: Vec<f64>, d: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, d, h, w], data).unwrap()
    }

    #[test]
    fn max_pool_2x_downsamples() {
        let x = vol((0..8).map(|v| v as f64).collect(), 2, 2, 2);
        let y = pool3d(&x, PoolMode::Max, 2, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.to_vec(), vec![7.0]);
    }

    #[test]
    fn min_pool_padded_window_ignores_padding() {
        // kernel 3, stride 1, padding 1: border windows only see real data.
        let x = vol(vec![5.0, 2.0, 7.0, 1.0, 9.0, 3.0, 8.0, 4.0], 2, 2, 2);
        let y = pool3d(&x, PoolMode::Min, 3, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        // Every window covers the whole 2x2x2 block, so all outputs the min.
        assert_eq!(y.to_vec(), vec![1.0; 8]);
    }

    /// min(x) == -max(-x) for random inputs, both modes, with padding.
    #[test]
    fn min_max_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let (d, h, w) = (
                rng.gen_range(2..5usize),
                rng.gen_range(2..5usize),
                rng.gen_range(2..5usize),
            );
            let n = d * h * w;
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = vol(data.clone(), d, h, w);
            let neg = vol(data.iter().map(|v| -v).collect(), d, h, w);
            let mn = pool3d(&x, PoolMode::Min, 2, 1, 1).unwrap();
            let mx = pool3d(&neg, PoolMode::Max, 2, 1, 1).unwrap();
            for (a, b) in mn.data().iter().zip(mx.data()) {
                assert_eq!(*a, -*b);
            }
        }
    }

    #[test]
    fn tie_routes_gradient_to_lowest_index() {
        let x =
            Tensor::parameter(&[1, 1, 2, 2, 2], vec![3.0, 3.0, 1.0, 3.0, 3.0, 3.0, 3.0, 3.0])
                .unwrap();
        let y = pool3d(&x, PoolMode::Max, 2, 2, 0).unwrap();
        assert_eq!(y.to_vec(), vec![3.0]);
        ops::sum_all(&y).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_scatters_to_argext() {
        let x =
            Tensor::parameter(&[1, 1, 2, 2, 2], vec![1.0, 4.0, 2.0, 3.0, 0.5, 1.5, 2.5, 3.5])
                .unwrap();
        let y = pool3d(&x, PoolMode::Max, 2, 2, 0).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);
        ops::sum_all(&y).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn padding_must_stay_below_kernel() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        assert!(pool3d(&x, PoolMode::Max, 2, 1, 2).is_err());
    }
}
