//! Whole-volume inference by tiled prediction.
//!
//! Volumes larger than one patch are covered by a regular grid of tiles;
//! the volume is zero-padded so the grid covers it exactly, tile
//! probabilities are averaged where tiles overlap, and the result is
//! cropped back to the input extents.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::ops::{self, Phase};
use crate::tensor::{lit, Scalar, Tensor};
use crate::unet::Model;

fn axis_tiles(dim: usize, patch: usize, overlap: f64) -> (usize, usize, usize) {
    // (tile count, step, padded extent)
    let step = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    if dim <= patch {
        return (1, step, patch);
    }
    let n = (dim - patch).div_ceil(step) + 1;
    (n, step, (n - 1) * step + patch)
}

/// Tiled sigmoid probabilities for one single-channel volume.
///
/// `overlap` is the fraction of each patch shared with its neighbour,
/// in [0, 0.9]. Output has the input dims, values in [0, 1].
pub fn sliding_window_predict<T: Scalar>(
    model: &Model<T>,
    image: &[f32],
    dims: [usize; 3],
    patch: [usize; 3],
    overlap: f64,
) -> Result<Vec<f32>> {
    let n: usize = dims.iter().product();
    if image.len() != n || n == 0 {
        return Err(CoreError::shape(
            "sliding_window_predict",
            format!("image length {} does not match dims {:?}", image.len(), dims),
        ));
    }
    if patch.iter().any(|&p| p == 0) {
        return Err(CoreError::config("patch extents must be positive"));
    }
    if !(0.0..=0.9).contains(&overlap) {
        return Err(CoreError::config(format!("overlap must lie in [0, 0.9], got {overlap}")));
    }

    let axes: Vec<(usize, usize, usize)> = (0..3)
        .map(|a| axis_tiles(dims[a], patch[a], overlap))
        .collect();
    let padded = [axes[0].2, axes[1].2, axes[2].2];

    let mut data = vec![0.0f32; padded.iter().product()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let src = (z * dims[1] + y) * dims[2];
            let dst = (z * padded[1] + y) * padded[2];
            data[dst..dst + dims[2]].copy_from_slice(&image[src..src + dims[2]]);
        }
    }

    let mut sum = vec![0.0f64; data.len()];
    let mut count = vec![0u32; data.len()];
    let [pd, ph, pw] = patch;
    for iz in 0..axes[0].0 {
        for iy in 0..axes[1].0 {
            for ix in 0..axes[2].0 {
                let oz = iz * axes[0].1;
                let oy = iy * axes[1].1;
                let ox = ix * axes[2].1;

                let mut tile: Vec<T> = Vec::with_capacity(pd * ph * pw);
                for z in 0..pd {
                    for y in 0..ph {
                        let src = ((oz + z) * padded[1] + oy + y) * padded[2] + ox;
                        tile.extend(data[src..src + pw].iter().map(|&v| lit::<T>(v as f64)));
                    }
                }
                let x = Tensor::from_vec(&[1, 1, pd, ph, pw], tile)?;
                let prob = ops::sigmoid(&model.forward(&x, Phase::Infer)?)?;
                let pdata = prob.data();
                for z in 0..pd {
                    for y in 0..ph {
                        let dst = ((oz + z) * padded[1] + oy + y) * padded[2] + ox;
                        let src = (z * ph + y) * pw;
                        for x in 0..pw {
                            sum[dst + x] +=
                                pdata[src + x].to_f64().ok_or(CoreError::NonFinite {
                                    op: "sliding_window_predict",
                                })?;
                            count[dst + x] += 1;
                        }
                    }
                }
            }
        }
    }

    let mut out = Vec::with_capacity(n);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = (z * padded[1] + y) * padded[2] + x;
                out.push((sum[i] / count[i] as f64) as f32);
            }
        }
    }
    Ok(out)
}

/// Maximum-intensity projection along one axis.
///
/// Axis 0 collapses depth to an (H, W) image, axis 1 height to (D, W),
/// axis 2 width to (D, H). Returns (rows, cols, row-major pixels).
pub fn max_projection(
    data: &[f32],
    dims: [usize; 3],
    axis: usize,
) -> Result<(usize, usize, Vec<f32>)> {
    let [d, h, w] = dims;
    if data.len() != d * h * w || data.is_empty() {
        return Err(CoreError::shape(
            "max_projection",
            format!("data length {} does not match dims {:?}", data.len(), dims),
        ));
    }
    if axis > 2 {
        return Err(CoreError::config(format!("axis must be 0, 1, or 2, got {axis}")));
    }
    let (rows, cols) = match axis {
        0 => (h, w),
        1 => (d, w),
        _ => (d, h),
    };
    let mut out = vec![f32::NEG_INFINITY; rows * cols];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = data[(z * h + y) * w + x];
                let i = match axis {
                    0 => y * w + x,
                    1 => z * w + x,
                    _ => z * h + y,
                };
                if v > out[i] {
                    out[i] = v;
                }
            }
        }
    }
    Ok((rows, cols, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{Model, UNetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> Model<f64> {
        let cfg = UNetConfig {
            level_channels: vec![2],
            bottleneck_channels: 4,
            ..UNetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::new(cfg, &mut rng).unwrap()
    }

    fn direct_prob(model: &Model<f64>, image: &[f32], dims: [usize; 3]) -> Vec<f64> {
        let data: Vec<f64> = image.iter().map(|&v| v as f64).collect();
        let x = Tensor::from_vec(&[1, 1, dims[0], dims[1], dims[2]], data).unwrap();
        ops::sigmoid(&model.forward(&x, Phase::Infer).unwrap())
            .unwrap()
            .to_vec()
    }

    #[test]
    fn single_tile_equals_direct_forward() {
        let model = tiny_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = [4, 4, 4];
        let image: Vec<f32> = (0..64).map(|_| rng.gen::<f32>()).collect();
        let tiled = sliding_window_predict(&model, &image, dims, [4, 4, 4], 0.5).unwrap();
        let direct = direct_prob(&model, &image, dims);
        for (a, b) in tiled.iter().zip(&direct) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
    }

    #[test]
    fn zeroed_model_yields_constant_half_everywhere() {
        let mut model = tiny_model(3);
        model.visit_params(&mut |p| {
            let shape = p.shape().to_vec();
            *p = Tensor::parameter(&shape, vec![0.0; p.len()]).unwrap();
        });
        let dims = [4, 6, 10];
        let image: Vec<f32> = (0..dims.iter().product()).map(|i| (i % 7) as f32 / 7.0).collect();
        for overlap in [0.0, 0.25, 0.5] {
            let prob = sliding_window_predict(&model, &image, dims, [4, 4, 4], overlap).unwrap();
            for &p in &prob {
                assert!((p - 0.5).abs() < 1e-7, "overlap {overlap}");
            }
        }
    }

    #[test]
    fn two_tile_overlap_is_the_mean_of_both_tiles() {
        let model = tiny_model(5);
        let dims = [4, 4, 12];
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let image: Vec<f32> = (0..n).map(|_| rng.gen::<f32>()).collect();

        // patch 8 wide, step 4: tiles at x=0 and x=4, overlap x in [4, 8).
        let stitched = sliding_window_predict(&model, &image, dims, [4, 4, 8], 0.5).unwrap();

        let slice = |x0: usize| -> Vec<f32> {
            let mut out = Vec::new();
            for z in 0..4 {
                for y in 0..4 {
                    for x in 0..8 {
                        out.push(image[(z * 4 + y) * 12 + x0 + x]);
                    }
                }
            }
            out
        };
        let left = direct_prob(&model, &slice(0), [4, 4, 8]);
        let right = direct_prob(&model, &slice(4), [4, 4, 8]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 4..8 {
                    let got = stitched[(z * 4 + y) * 12 + x] as f64;
                    let l = left[(z * 4 + y) * 8 + x];
                    let r = right[(z * 4 + y) * 8 + x - 4];
                    assert!((got - 0.5 * (l + r)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn output_stays_in_unit_interval_and_input_is_validated() {
        let model = tiny_model(7);
        let image = vec![0.5f32; 64];
        let prob = sliding_window_predict(&model, &image, [4, 4, 4], [4, 4, 4], 0.0).unwrap();
        assert!(prob.iter().all(|&p| (0.0..=1.0).contains(&p)));

        assert!(sliding_window_predict(&model, &image, [4, 4, 4], [4, 4, 4], 0.95).is_err());
        assert!(sliding_window_predict(&model, &image, [4, 4, 5], [4, 4, 4], 0.5).is_err());
        assert!(sliding_window_predict(&model, &image, [4, 4, 4], [0, 4, 4], 0.5).is_err());
    }

    #[test]
    fn projection_collapses_each_axis() {
        let dims = [2, 3, 4];
        let mut data = vec![0.1f32; 24];
        data[(1 * 3 + 2) * 4 + 3] = 0.9; // (z=1, y=2, x=3)
        let (r, c, img) = max_projection(&data, dims, 0).unwrap();
        assert_eq!((r, c), (3, 4));
        assert_eq!(img[2 * 4 + 3], 0.9);
        assert_eq!(img.iter().filter(|&&v| v == 0.9).count(), 1);

        let (r, c, img) = max_projection(&data, dims, 1).unwrap();
        assert_eq!((r, c), (2, 4));
        assert_eq!(img[1 * 4 + 3], 0.9);

        let (r, c, img) = max_projection(&data, dims, 2).unwrap();
        assert_eq!((r, c), (2, 3));
        assert_eq!(img[1 * 3 + 2], 0.9);

        assert!(max_projection(&data, dims, 3).is_err());
    }

    #[test]
    fn projection_is_flip_invariant_along_its_axis() {
        let dims = [3, 4, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..60).map(|_| rng.gen::<f32>()).collect();
        // Flip depth: projection along depth unchanged.
        let mut flipped = vec![0.0f32; 60];
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    flipped[(z * 4 + y) * 5 + x] = data[((2 - z) * 4 + y) * 5 + x];
                }
            }
        }
        let a = max_projection(&data, dims, 0).unwrap();
        let b = max_projection(&flipped, dims, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_volume_projects_to_constant_image() {
        let data = vec![0.25f32; 2 * 2 * 2];
        for axis in 0..3 {
            let (_, _, img) = max_projection(&data, [2, 2, 2], axis).unwrap();
            assert!(img.iter().all(|&v| v == 0.25));
        }
    }
}
