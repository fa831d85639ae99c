//! Volumetric containers and spatial preprocessing.
//!
//! A `Volume` is a dense [D, H, W] grid, width index fastest. Images are
//! f32 in [0, 1] (u8 sources are scaled on conversion); labels are u8
//! masks with values {0, 1}. Augmentation applies one rigid transform to
//! image and label together so they stay voxel-aligned.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            VoxelData::U8(_) => "u8",
            VoxelData::F32(_) => "f32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: VoxelData,
    pub spacing: Option<[f64; 3]>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: VoxelData) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if expect == 0 {
            return Err(CoreError::data("volume dims must all be positive"));
        }
        if data.len() != expect {
            return Err(CoreError::data(format!(
                "dims {}x{}x{} need {expect} voxels, got {}",
                dims[0],
                dims[1],
                dims[2],
                data.len()
            )));
        }
        if let VoxelData::F32(v) = &data {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::data("volume voxels must be finite"));
            }
        }
        Ok(Volume { dims, data, spacing: None })
    }

    pub fn from_f32(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Volume::new(dims, VoxelData::F32(data))
    }

    pub fn from_u8(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        Volume::new(dims, VoxelData::U8(data))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    /// f32 view with u8 sources scaled by 1/255 into [0, 1].
    pub fn as_f32_normalized(&self) -> Vec<f32> {
        match &self.data {
            VoxelData::U8(v) => v.iter().map(|&b| b as f32 / 255.0).collect(),
            VoxelData::F32(v) => v.clone(),
        }
    }

    /// Binary mask view; errors when any voxel is outside {0, 1}.
    pub fn as_binary(&self) -> Result<Vec<u8>> {
        match &self.data {
            VoxelData::U8(v) => {
                if v.iter().any(|&b| b > 1) {
                    return Err(CoreError::data("label voxels must be 0 or 1"));
                }
                Ok(v.clone())
            }
            VoxelData::F32(v) => {
                let mut out = Vec::with_capacity(v.len());
                for &x in v {
                    if x == 0.0 {
                        out.push(0);
                    } else if x == 1.0 {
                        out.push(1);
                    } else {
                        return Err(CoreError::data("label voxels must be 0 or 1"));
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Aligned image/label pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub label: Volume,
}

impl Sample {
    pub fn new(image: Volume, label: Volume) -> Result<Self> {
        if image.dims() != label.dims() {
            return Err(CoreError::data(format!(
                "image dims {:?} and label dims {:?} differ",
                image.dims(),
                label.dims()
            )));
        }
        label.as_binary()?;
        Ok(Sample { image, label })
    }
}

fn reflect(mut i: i64, n: i64) -> usize {
    // Half-sample symmetric: ... x1 x0 | x0 x1 ... xn-1 | xn-1 ...
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with reflective borders, images only.
///
/// Each axis pass accumulates the symmetric sample pairs before adding,
/// so the result commutes exactly with axis flips.
pub fn gaussian3d(v: &Volume, sigma: f64) -> Result<Volume> {
    if !(sigma > 0.0) {
        return Err(CoreError::config(format!("sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let [d, h, w] = v.dims();
    let mut data: Vec<f64> = v.as_f32_normalized().iter().map(|&x| x as f64).collect();

    // Axis strides for (depth, height, width) passes.
    let passes = [(h * w, d), (w, h), (1, w)];
    for &(stride, extent) in &passes {
        let mut out = vec![0.0f64; data.len()];
        let n = extent as i64;
        let lines = data.len() / extent;
        for line in 0..lines {
            // Base offset of this 1D line through the chosen axis.
            let block = stride * extent;
            let base = (line / stride) * block + (line % stride);
            for i in 0..n {
                let mut acc = kernel[radius as usize] * data[base + (i as usize) * stride];
                for r in 1..=radius {
                    let a = data[base + reflect(i - r, n) * stride];
                    let b = data[base + reflect(i + r, n) * stride];
                    acc += kernel[(radius + r) as usize] * (a + b);
                }
                out[base + (i as usize) * stride] = acc;
            }
        }
        data = out;
    }
    let mut out = Volume::from_f32(v.dims(), data.into_iter().map(|x| x as f32).collect())?;
    out.spacing = v.spacing;
    Ok(out)
}

/// One rigid transform plus crop origin, drawn once per augmentation so
/// image and label always share it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    /// Flip along the height axis.
    pub flip_h: bool,
    /// Flip along the width axis.
    pub flip_w: bool,
    /// Quarter turns counterclockwise in the H-W plane.
    pub quarter_turns: u8,
    /// Crop origin in (D, H, W) order, applied after padding.
    pub origin: [usize; 3],
}

fn flip_axis<TV: Copy>(data: &[TV], dims: [usize; 3], axis: usize) -> Vec<TV> {
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(data.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = match axis {
                    1 => (z, h - 1 - y, x),
                    2 => (z, y, w - 1 - x),
                    _ => (d - 1 - z, y, x),
                };
                out.push(data[(sz * h + sy) * w + sx]);
            }
        }
    }
    out
}

/// 90 degrees counterclockwise in the H-W plane: (y, x) <- (x, H-1-y)
/// reads source (y_s, x_s) = (x_d, W_s-1-y_d) with swapped extents.
fn rot90<TV: Copy>(data: &[TV], dims: [usize; 3]) -> (Vec<TV>, [usize; 3]) {
    let [d, h, w] = dims;
    let (nh, nw) = (w, h);
    let mut out = Vec::with_capacity(data.len());
    for z in 0..d {
        for y in 0..nh {
            for x in 0..nw {
                let (sy, sx) = (x, w - 1 - y);
                out.push(data[(z * h + sy) * w + sx]);
            }
        }
    }
    (out, [d, nh, nw])
}

fn pad_to<TV: Copy + Default>(data: &[TV], dims: [usize; 3], target: [usize; 3]) -> Vec<TV> {
    let [d, h, w] = dims;
    let [td, th, tw] = target;
    let mut out = vec![TV::default(); td * th * tw];
    for z in 0..d {
        for y in 0..h {
            let src = (z * h + y) * w;
            let dst = (z * th + y) * tw;
            out[dst..dst + w].copy_from_slice(&data[src..src + w]);
        }
    }
    out
}

fn crop<TV: Copy>(
    data: &[TV],
    dims: [usize; 3],
    origin: [usize; 3],
    patch: [usize; 3],
) -> Vec<TV> {
    let [_, h, w] = dims;
    let mut out = Vec::with_capacity(patch.iter().product());
    for z in 0..patch[0] {
        for y in 0..patch[1] {
            let src = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
            out.extend_from_slice(&data[src..src + patch[2]]);
        }
    }
    out
}

fn transform<TV: Copy + Default>(
    data: &[TV],
    dims: [usize; 3],
    draw: &AugmentDraw,
    patch: [usize; 3],
) -> Vec<TV> {
    let mut cur = data.to_vec();
    let mut cur_dims = dims;
    if draw.flip_h {
        cur = flip_axis(&cur, cur_dims, 1);
    }
    if draw.flip_w {
        cur = flip_axis(&cur, cur_dims, 2);
    }
    for _ in 0..(draw.quarter_turns % 4) {
        let (next, next_dims) = rot90(&cur, cur_dims);
        cur = next;
        cur_dims = next_dims;
    }
    let padded = [
        cur_dims[0].max(patch[0]),
        cur_dims[1].max(patch[1]),
        cur_dims[2].max(patch[2]),
    ];
    if padded != cur_dims {
        cur = pad_to(&cur, cur_dims, padded);
        cur_dims = padded;
    }
    crop(&cur, cur_dims, draw.origin, patch)
}

/// Applies a fixed draw; `augment` samples the draw, this does the work.
pub fn augment_with(s: &Sample, draw: &AugmentDraw, patch: [usize; 3]) -> Result<Sample> {
    if patch.iter().any(|&e| e == 0) {
        return Err(CoreError::config("patch extents must be positive"));
    }
    let mut dims = s.image.dims();
    if draw.quarter_turns % 2 == 1 {
        dims.swap(1, 2);
    }
    let padded = [
        dims[0].max(patch[0]),
        dims[1].max(patch[1]),
        dims[2].max(patch[2]),
    ];
    for a in 0..3 {
        if draw.origin[a] + patch[a] > padded[a] {
            return Err(CoreError::config(format!(
                "crop origin {:?} with patch {:?} leaves volume {:?}",
                draw.origin, patch, padded
            )));
        }
    }

    let image = transform(&s.image.as_f32_normalized(), s.image.dims(), draw, patch);
    let label = transform(&s.label.as_binary()?, s.label.dims(), draw, patch);
    Sample::new(
        Volume::from_f32(patch, image)?,
        Volume::from_u8(patch, label)?,
    )
}

/// Random flip, quarter-turn rotation, and crop to `patch`, drawn in a
/// fixed order from `rng` so runs are reproducible.
pub fn augment<R: Rng + ?Sized>(s: &Sample, rng: &mut R, patch: [usize; 3]) -> Result<Sample> {
    let flip_h = rng.gen_bool(0.5);
    let flip_w = rng.gen_bool(0.5);
    let quarter_turns = (rng.gen::<u32>() % 4) as u8;

    let mut dims = s.image.dims();
    if quarter_turns % 2 == 1 {
        dims.swap(1, 2);
    }
    let mut origin = [0usize; 3];
    for a in 0..3 {
        let room = dims[a].max(patch[a]) - patch[a];
        origin[a] = if room == 0 { 0 } else { rng.gen_range(0..=room) };
    }
    augment_with(s, &AugmentDraw { flip_h, flip_w, quarter_turns, origin }, patch)
}
