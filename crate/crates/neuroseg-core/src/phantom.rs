//! Synthetic tubular-tree phantoms.
//!
//! The label is a union of voxelized tubes branching from a root; the
//! image is the label plus optional Gaussian noise, background speckle,
//! and intensity gaps cut into thin branches. Ground truth keeps the
//! gapped voxels, so a segmenter has to bridge faint or missing signal
//! the way real tracing data demands. Generation is a pure function of
//! the spec.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{CoreError, Result};
use crate::volume::{Sample, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Tube segments grown off the existing tree.
    pub branches: usize,
    /// Tube radius bounds in voxels, inclusive.
    pub radius_range: (f64, f64),
    /// Standard deviation of additive Gaussian intensity noise; 0 turns
    /// all image corruption off.
    pub noise_sigma: f64,
    /// Chance that a thin branch loses a contiguous run of its image
    /// intensity. Labels are never gapped.
    pub gap_probability: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            branches: 6,
            radius_range: (1.0, 2.5),
            noise_sigma: 0.08,
            gap_probability: 0.2,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(CoreError::config(format!(
                "dims {:?} too small, every extent must be at least 8",
                self.dims
            )));
        }
        if self.branches == 0 {
            return Err(CoreError::config("at least one branch is required"));
        }
        let (lo, hi) = self.radius_range;
        if !(lo >= 1.0 && hi >= lo) {
            return Err(CoreError::config(format!(
                "radius range ({lo}, {hi}) must satisfy 1 <= lo <= hi"
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(CoreError::config("noise_sigma must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.gap_probability) {
            return Err(CoreError::config("gap_probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn gauss_pair<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let t = 2.0 * core::f64::consts::PI * u2;
    (r * t.cos(), r * t.sin())
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let (a, b) = gauss_pair(rng);
        let (c, _) = gauss_pair(rng);
        let n = (a * a + b * b + c * c).sqrt();
        if n > 1e-6 {
            return [a / n, b / n, c / n];
        }
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Centerline step points of one branch, all sharing one radius.
struct Branch {
    points: Vec<[f64; 3]>,
    radius: f64,
}

fn stamp(mask: &mut [u8], dims: [usize; 3], p: [f64; 3], radius: f64) {
    let [d, h, w] = dims;
    let r2 = radius * radius;
    let lo = |c: f64| ((c - radius).floor().max(0.0)) as usize;
    let hi = |c: f64, n: usize| ((c + radius).ceil() as usize).min(n - 1);
    for z in lo(p[0])..=hi(p[0], d) {
        for y in lo(p[1])..=hi(p[1], h) {
            for x in lo(p[2])..=hi(p[2], w) {
                let dz = z as f64 - p[0];
                let dy = y as f64 - p[1];
                let dx = x as f64 - p[2];
                if dz * dz + dy * dy + dx * dx <= r2 {
                    mask[(z * h + y) * w + x] = 1;
                }
            }
        }
    }
}

/// Deterministic tubular-tree sample for the given spec.
pub fn synth_phantom(spec: &PhantomSpec) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [d, h, w] = spec.dims;
    let n = d * h * w;
    let fdims = [d as f64, h as f64, w as f64];
    let min_dim = d.min(h).min(w) as f64;

    // Grow the centerline tree first; every random draw below depends
    // only on the seed, so geometry is stable across noise settings.
    let root = [
        fdims[0] * (0.35 + 0.3 * rng.gen::<f64>()),
        fdims[1] * (0.35 + 0.3 * rng.gen::<f64>()),
        fdims[2] * (0.35 + 0.3 * rng.gen::<f64>()),
    ];
    let mut anchors: Vec<([f64; 3], [f64; 3])> = vec![(root, random_unit(&mut rng))];
    let mut branches: Vec<Branch> = Vec::with_capacity(spec.branches);
    let (rlo, rhi) = spec.radius_range;
    for b in 0..spec.branches {
        let (start, parent_dir) = anchors[rng.gen_range(0..anchors.len())];
        let mut dir = if b == 0 {
            parent_dir
        } else {
            let kick = random_unit(&mut rng);
            normalize([
                parent_dir[0] + 0.9 * kick[0],
                parent_dir[1] + 0.9 * kick[1],
                parent_dir[2] + 0.9 * kick[2],
            ])
        };
        let radius = rlo + (rhi - rlo) * rng.gen::<f64>();
        let length = min_dim * (0.35 + 0.3 * rng.gen::<f64>());
        let steps = (length / 0.5).ceil() as usize;
        let mut p = start;
        let mut points = Vec::with_capacity(steps);
        for _ in 0..steps {
            points.push(p);
            let kick = random_unit(&mut rng);
            dir = normalize([
                dir[0] + 0.15 * kick[0],
                dir[1] + 0.15 * kick[1],
                dir[2] + 0.15 * kick[2],
            ]);
            for a in 0..3 {
                let next = p[a] + 0.5 * dir[a];
                // Bounce at a margin so tubes stay inside the volume.
                if next < 2.0 || next > fdims[a] - 3.0 {
                    dir[a] = -dir[a];
                }
                p[a] += 0.5 * dir[a];
            }
        }
        if let Some(&mid) = points.get(points.len() / 2) {
            anchors.push((mid, dir));
        }
        anchors.push((p, dir));
        branches.push(Branch { points, radius });
    }

    let mut label = vec![0u8; n];
    for branch in &branches {
        for &p in &branch.points {
            stamp(&mut label, spec.dims, p, branch.radius);
        }
    }

    // Image corruption: gaps on thin branches, then speckle and noise.
    let mut gap = vec![0u8; n];
    let thin_cutoff = rlo + 0.5 * (rhi - rlo);
    for branch in &branches {
        if branch.radius > thin_cutoff || branch.points.len() < 4 {
            continue;
        }
        if spec.gap_probability > 0.0 && rng.gen_bool(spec.gap_probability) {
            let frac = 0.2 + 0.2 * rng.gen::<f64>();
            let len = ((branch.points.len() as f64 * frac) as usize).max(1);
            let start = rng.gen_range(0..=branch.points.len() - len);
            for &p in &branch.points[start..start + len] {
                stamp(&mut gap, spec.dims, p, branch.radius);
            }
        }
    }

    let mut image: Vec<f32> = label
        .iter()
        .zip(&gap)
        .map(|(&l, &g)| if l == 1 && g == 0 { 1.0 } else { 0.0 })
        .collect();
    if spec.noise_sigma > 0.0 {
        for v in image.iter_mut() {
            if *v == 0.0 && rng.gen_bool(0.02) {
                *v = (0.5 + 0.5 * rng.gen::<f64>()) as f32;
            }
        }
        let mut i = 0;
        while i < n {
            let (a, b) = gauss_pair(&mut rng);
            image[i] = (image[i] as f64 + spec.noise_sigma * a).clamp(0.0, 1.0) as f32;
            if i + 1 < n {
                image[i + 1] =
                    (image[i + 1] as f64 + spec.noise_sigma * b).clamp(0.0, 1.0) as f32;
            }
            i += 2;
        }
    }

    Sample::new(Volume::from_f32(spec.dims, image)?, Volume::from_u8(spec.dims, label)?)
}
