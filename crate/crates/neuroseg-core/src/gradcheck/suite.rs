//! Named gradient checks for every differentiable operator, each run on
//! several seeded shapes.
//!
//! Kink discipline: inputs are shuffled lattices whose pairwise gaps
//! exceed twice the probe step, so pooling argmax choices and relu
//! activations never switch inside a probe; the few exact-zero hazards
//! (relu, the bce hinge) are excluded by value.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::gir::{GirBlock, GirConfig};
use crate::gradcheck::{check_gradients, CheckInput, GradCheckReport, GradCheckSettings};
use crate::loss::{self, LossConfig, LossMode, Progress};
use crate::ops::{self, Phase, PoolMode, RunningStats};
use crate::tensor::Tensor;

const SEEDS: u64 = 5;

/// Publicly runnable operator names, in suite order.
pub fn op_names() -> &'static [&'static str] {
    &[
        "conv3d",
        "unit_conv",
        "conv_transpose3d",
        "upsample_nearest",
        "pool3d_max",
        "pool3d_min",
        "relu",
        "sigmoid",
        "batchnorm3d",
        "matmul",
        "gir_forward",
        "soft_skeleton",
        "skeleton_loss",
        "bce",
        "compound_loss",
    ]
}

/// Shuffled lattice: `len` distinct values spanning (lo, hi) whose
/// pairwise gaps are (hi-lo)/len, placed in random order.
fn lattice(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    let gap = (hi - lo) / len as f64;
    let mut idx: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx.into_iter().map(|k| lo + (k as f64 + 0.5) * gap).collect()
}

fn binary_mask(rng: &mut ChaCha8Rng, len: usize, frac: f64) -> Vec<f64> {
    (0..len).map(|_| f64::from(rng.gen_bool(frac))).collect()
}

/// Reduces `out` against a fixed random weighting so every output
/// element influences the scalar with a distinct coefficient.
fn weighted(out: &Tensor<f64>, weights: &Tensor<f64>) -> Result<Tensor<f64>> {
    ops::sum_all(&ops::mul(out, weights)?)
}

fn probe_weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> CheckInput {
    let len = shape.iter().product();
    CheckInput::constant(shape, lattice(rng, len, -1.0, 1.0))
}

fn check_conv3d(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0 + seed);
    // (ci, co, dims, kernel, stride, padding)
    let cases = [
        (1usize, 2usize, [3usize, 4, 3], 3usize, 1usize, 1usize),
        (2, 1, [4, 3, 3], 3, 1, 0),
        (2, 2, [3, 3, 3], 1, 1, 0),
        (1, 2, [5, 4, 4], 3, 2, 1),
        (2, 2, [4, 4, 5], 2, 2, 1),
    ];
    let (ci, co, dims, k, s, p) = cases[seed as usize % cases.len()];
    let [d, h, w] = dims;
    let out_e = |e: usize| (e + 2 * p - k) / s + 1;
    let out_shape = [1, co, out_e(d), out_e(h), out_e(w)];

    let xs = [1, ci, d, h, w];
    let x_len = ci * d * h * w;
    let wlen = co * ci * k * k * k;
    let inputs = vec![
        CheckInput::new(&xs, lattice(&mut rng, x_len, -1.0, 1.0)),
        CheckInput::new(&[co, ci, k, k, k], lattice(&mut rng, wlen, -0.8, 0.8)),
        CheckInput::new(&[co], lattice(&mut rng, co, -0.3, 0.3)),
        probe_weights(&mut rng, &out_shape),
    ];
    check_gradients(
        &format!("conv3d#{seed}"),
        &inputs,
        None,
        &move |lv| weighted(&ops::conv3d(&lv[0], &lv[1], &lv[2], [s; 3], [p; 3])?, &lv[3]),
        settings,
    )
}

fn check_unit_conv(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1c + seed);
    let s = 5 + seed as usize;
    let ci = 2 + (seed as usize % 2);
    let co = 1 + (seed as usize % 3);
    let inputs = vec![
        CheckInput::new(&[s, ci], lattice(&mut rng, s * ci, -1.0, 1.0)),
        CheckInput::new(&[co, ci], lattice(&mut rng, co * ci, -0.8, 0.8)),
        CheckInput::new(&[co], lattice(&mut rng, co, -0.3, 0.3)),
        probe_weights(&mut rng, &[s, co]),
    ];
    check_gradients(
        &format!("unit_conv#{seed}"),
        &inputs,
        None,
        &|lv| weighted(&ops::unit_conv(&lv[0], &lv[1], &lv[2])?, &lv[3]),
        settings,
    )
}

fn check_conv_transpose3d(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7c + seed);
    let cases = [
        (1usize, 2usize, [2usize, 3, 2], 2usize, 2usize),
        (2, 1, [3, 2, 2], 2, 2),
        (2, 2, [2, 2, 2], 2, 1),
        (1, 1, [3, 3, 2], 3, 2),
        (2, 2, [2, 3, 3], 2, 2),
    ];
    let (ci, co, dims, k, s) = cases[seed as usize % cases.len()];
    let [d, h, w] = dims;
    let out_e = |e: usize| (e - 1) * s + k;
    let out_shape = [1, co, out_e(d), out_e(h), out_e(w)];
    let inputs = vec![
        CheckInput::new(&[1, ci, d, h, w], lattice(&mut rng, ci * d * h * w, -1.0, 1.0)),
        CheckInput::new(&[ci, co, k, k, k], lattice(&mut rng, ci * co * k * k * k, -0.8, 0.8)),
        CheckInput::new(&[co], lattice(&mut rng, co, -0.3, 0.3)),
        probe_weights(&mut rng, &out_shape),
    ];
    check_gradients(
        &format!("conv_transpose3d#{seed}"),
        &inputs,
        None,
        &move |lv| weighted(&ops::conv_transpose3d(&lv[0], &lv[1], &lv[2], [s; 3])?, &lv[3]),
        settings,
    )
}

fn check_upsample(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x27 + seed);
    let c = 1 + (seed as usize % 2);
    let dims = [2 + (seed as usize % 2), 2, 3];
    let [d, h, w] = dims;
    let inputs = vec![
        CheckInput::new(&[1, c, d, h, w], lattice(&mut rng, c * d * h * w, -1.0, 1.0)),
        probe_weights(&mut rng, &[1, c, 2 * d, 2 * h, 2 * w]),
    ];
    check_gradients(
        &format!("upsample_nearest#{seed}"),
        &inputs,
        None,
        &|lv| weighted(&ops::upsample_nearest2x(&lv[0])?, &lv[1]),
        settings,
    )
}

fn check_pool(mode: PoolMode, seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let tag = match mode {
        PoolMode::Max => "pool3d_max",
        PoolMode::Min => "pool3d_min",
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x90 + seed);
    // (dims, kernel, stride, padding), padding < kernel always.
    let cases = [
        ([4usize, 4, 4], 2usize, 2usize, 0usize),
        ([3, 4, 3], 3, 1, 1),
        ([4, 3, 4], 2, 1, 0),
        ([5, 4, 4], 3, 2, 1),
        ([4, 4, 5], 2, 2, 1),
    ];
    let (dims, k, s, p) = cases[seed as usize % cases.len()];
    let [d, h, w] = dims;
    let out_e = |e: usize| (e + 2 * p - k) / s + 1;
    let out_shape = [1, 1, out_e(d), out_e(h), out_e(w)];
    let inputs = vec![
        CheckInput::new(&[1, 1, d, h, w], lattice(&mut rng, d * h * w, -1.0, 1.0)),
        probe_weights(&mut rng, &out_shape),
    ];
    check_gradients(
        &format!("{tag}#{seed}"),
        &inputs,
        None,
        &move |lv| weighted(&ops::pool3d(&lv[0], mode, k, s, p)?, &lv[1]),
        settings,
    )
}

fn check_relu(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe1 + seed);
    let n = 24 + seed as usize;
    let step = settings.step;
    let inputs = vec![
        CheckInput::new(&[n], lattice(&mut rng, n, -1.0, 1.0)),
        probe_weights(&mut rng, &[n]),
    ];
    check_gradients(
        &format!("relu#{seed}"),
        &inputs,
        Some(&move |i, _, v: f64| i == 0 && v.abs() < 3.0 * step),
        &|lv| weighted(&ops::relu(&lv[0])?, &lv[1]),
        settings,
    )
}

fn check_sigmoid(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x51 + seed);
    let n = 24 + seed as usize;
    let inputs = vec![
        CheckInput::new(&[n], lattice(&mut rng, n, -3.0, 3.0)),
        probe_weights(&mut rng, &[n]),
    ];
    check_gradients(
        &format!("sigmoid#{seed}"),
        &inputs,
        None,
        &|lv| weighted(&ops::sigmoid(&lv[0])?, &lv[1]),
        settings,
    )
}

fn check_batchnorm(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xb4 + seed);
    let c = 2;
    let shape = [2usize, c, 2, 2, 2];
    let len: usize = shape.iter().product();
    let inputs = vec![
        CheckInput::new(&shape, lattice(&mut rng, len, -1.0, 1.0)),
        CheckInput::new(&[c], lattice(&mut rng, c, 0.5, 1.5)),
        CheckInput::new(&[c], lattice(&mut rng, c, -0.3, 0.3)),
        probe_weights(&mut rng, &shape),
    ];
    // Last seed exercises the inference path with fixed statistics.
    let phase = if seed == SEEDS - 1 { Phase::Infer } else { Phase::Train };
    check_gradients(
        &format!("batchnorm3d#{seed}"),
        &inputs,
        None,
        &move |lv| {
            let running = RunningStats::new(c);
            running.set(&[0.1, -0.2], &[0.9, 1.3])?;
            let y = ops::batchnorm3d(&lv[0], &lv[1], &lv[2], 1e-5, 0.1, phase, &running)?;
            weighted(&y, &lv[3])
        },
        settings,
    )
}

fn check_matmul(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3a + seed);
    let (m, k, n) = (2 + seed as usize % 3, 3 + seed as usize % 2, 2 + seed as usize % 2);
    let inputs = vec![
        CheckInput::new(&[m, k], lattice(&mut rng, m * k, -1.0, 1.0)),
        CheckInput::new(&[k, n], lattice(&mut rng, k * n, -1.0, 1.0)),
        probe_weights(&mut rng, &[m, n]),
    ];
    check_gradients(
        &format!("matmul#{seed}"),
        &inputs,
        None,
        &|lv| weighted(&ops::matmul(&lv[0], &lv[1])?, &lv[2]),
        settings,
    )
}

fn check_gir(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    // The block composes batch statistics with two matmul stages; the
    // resulting curvature needs a finer probe to keep central-difference
    // truncation (which shrinks as step^2) below tolerance.
    let settings = &GradCheckSettings { step: settings.step.min(1e-4), ..*settings };
    let mut rng = ChaCha8Rng::seed_from_u64(0x61 + seed);
    let c = if seed % 2 == 0 { 4 } else { 8 };
    let cfg = GirConfig::from_channels(c)?;
    let (n, cg, co) = (cfg.n_nodes, cfg.c_gcn, cfg.c_gcn_out);
    let dims = [2usize, 2, 2];
    let xshape = [1, c, dims[0], dims[1], dims[2]];
    let xlen: usize = xshape.iter().product();

    let inputs = vec![
        CheckInput::new(&xshape, lattice(&mut rng, xlen, -1.0, 1.0)),
        CheckInput::new(&[n, c], lattice(&mut rng, n * c, -0.7, 0.7)),
        CheckInput::new(&[n], lattice(&mut rng, n, -0.2, 0.2)),
        CheckInput::new(&[cg, c], lattice(&mut rng, cg * c, -0.7, 0.7)),
        CheckInput::new(&[cg], lattice(&mut rng, cg, -0.2, 0.2)),
        CheckInput::new(&[n, n], lattice(&mut rng, n * n, -0.6, 0.6)),
        CheckInput::new(&[cg, co], lattice(&mut rng, cg * co, -0.7, 0.7)),
        CheckInput::new(&[c, co], lattice(&mut rng, c * co, -0.7, 0.7)),
        CheckInput::new(&[c], lattice(&mut rng, c, -0.2, 0.2)),
        CheckInput::new(&[c], lattice(&mut rng, c, 0.6, 1.4)),
        CheckInput::new(&[c], lattice(&mut rng, c, -0.3, 0.3)),
        probe_weights(&mut rng, &xshape),
    ];
    check_gradients(
        &format!("gir_forward#{seed}"),
        &inputs,
        None,
        &move |lv| {
            let block = GirBlock::from_parts(
                cfg,
                [
                    lv[1].clone(),
                    lv[2].clone(),
                    lv[3].clone(),
                    lv[4].clone(),
                    lv[5].clone(),
                    lv[6].clone(),
                    lv[7].clone(),
                    lv[8].clone(),
                    lv[9].clone(),
                    lv[10].clone(),
                ],
            )?;
            weighted(&block.forward(&lv[0], Phase::Train)?, &lv[11])
        },
        settings,
    )
}

fn check_soft_skeleton(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x55 + seed);
    let dims = [4usize, 4, 4];
    let shape = [1, 1, dims[0], dims[1], dims[2]];
    let len: usize = shape.iter().product();
    let iters = seed as usize % 3;
    let inputs = vec![
        CheckInput::new(&shape, lattice(&mut rng, len, 0.05, 0.95)),
        probe_weights(&mut rng, &shape),
    ];
    check_gradients(
        &format!("soft_skeleton#{seed}"),
        &inputs,
        None,
        &move |lv| weighted(&loss::soft_skeleton(&lv[0], iters)?, &lv[1]),
        settings,
    )
}

fn check_skeleton_loss(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5f + seed);
    let shape = [1usize, 1, 3, 4, 3];
    let len: usize = shape.iter().product();
    let cfg = LossConfig { skeleton_iters: 2, ..LossConfig::default() };
    let inputs = vec![
        CheckInput::new(&shape, lattice(&mut rng, len, 0.05, 0.95)),
        CheckInput::constant(&shape, binary_mask(&mut rng, len, 0.3)),
    ];
    check_gradients(
        &format!("skeleton_loss#{seed}"),
        &inputs,
        None,
        &move |lv| loss::skeleton_loss(&lv[0], &lv[1], &cfg),
        settings,
    )
}

fn check_bce(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbc + seed);
    let shape = [1usize, 1, 2, 3, 3];
    let len: usize = shape.iter().product();
    let step = settings.step;
    let inputs = vec![
        CheckInput::new(&shape, lattice(&mut rng, len, -2.0, 2.0)),
        CheckInput::constant(&shape, binary_mask(&mut rng, len, 0.4)),
    ];
    check_gradients(
        &format!("bce#{seed}"),
        &inputs,
        Some(&move |i, _, v: f64| i == 0 && v.abs() < 3.0 * step),
        &|lv| loss::bce_loss(&lv[0], &lv[1]),
        settings,
    )
}

fn check_compound(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xcd + seed);
    let shape = [1usize, 1, 6, 6, 6];
    let len: usize = shape.iter().product();
    let cfg = LossConfig { skeleton_iters: 2, mode: LossMode::Compound, ..LossConfig::default() };
    let pr = Progress {
        current_iteration: 10 * (seed + 1),
        total_iterations: 2000,
        epochs_planned: 200,
    };
    let step = settings.step;
    let inputs = vec![
        CheckInput::new(&shape, lattice(&mut rng, len, -2.0, 2.0)),
        CheckInput::constant(&shape, binary_mask(&mut rng, len, 0.25)),
    ];
    check_gradients(
        &format!("compound_loss#{seed}"),
        &inputs,
        Some(&move |i, _, v: f64| i == 0 && v.abs() < 3.0 * step),
        &move |lv| Ok(loss::compound_loss(&lv[0], &lv[1], &pr, &cfg)?.loss),
        settings,
    )
}

/// Deliberately wrong backward, for exercising failure paths end to end.
/// Not part of `op_names` or `run_all`.
fn check_selftest_broken(seed: u64, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![CheckInput::new(&[4], lattice(&mut rng, 4, -1.0, 1.0))];
    check_gradients(
        &format!("selftest_broken#{seed}"),
        &inputs,
        None,
        &|lv| {
            let x = &lv[0];
            let data: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
            let nx = x.requires_grad();
            let y = Tensor::from_op(
                "selftest_broken",
                x.shape().to_vec(),
                data,
                vec![x.clone()],
                move |g| vec![nx.then(|| g.iter().map(|v| 3.0 * v).collect())],
            )?;
            ops::sum_all(&y)
        },
        settings,
    )
}

/// Runs one named operator check over its seeded shape set.
pub fn run_op(name: &str, settings: &GradCheckSettings) -> Result<Vec<GradCheckReport>> {
    let runner: fn(u64, &GradCheckSettings) -> Result<GradCheckReport> = match name {
        "conv3d" => check_conv3d,
        "unit_conv" => check_unit_conv,
        "conv_transpose3d" => check_conv_transpose3d,
        "upsample_nearest" => check_upsample,
        "pool3d_max" => |s, t| check_pool(PoolMode::Max, s, t),
        "pool3d_min" => |s, t| check_pool(PoolMode::Min, s, t),
        "relu" => check_relu,
        "sigmoid" => check_sigmoid,
        "batchnorm3d" => check_batchnorm,
        "matmul" => check_matmul,
        "gir_forward" => check_gir,
        "soft_skeleton" => check_soft_skeleton,
        "skeleton_loss" => check_skeleton_loss,
        "bce" => check_bce,
        "compound_loss" => check_compound,
        "selftest_broken" => check_selftest_broken,
        other => {
            return Err(CoreError::config(format!(
                "unknown operator {other}; valid names: {}",
                op_names().join(", ")
            )))
        }
    };
    (0..SEEDS).map(|seed| runner(seed, settings)).collect()
}

/// Every public operator, every seed.
pub fn run_all(settings: &GradCheckSettings) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for name in op_names() {
        out.extend(run_op(name, settings)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_gaps_exceed_twice_the_default_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vals = lattice(&mut rng, 216, -2.0, 2.0);
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in sorted.windows(2) {
            assert!(pair[1] - pair[0] > 2.0 * GradCheckSettings::default().step);
        }
        assert_eq!(vals.len(), 216);
    }

    #[test]
    fn every_public_op_passes() {
        let settings = GradCheckSettings::default();
        let reports = run_all(&settings).unwrap();
        assert_eq!(reports.len(), op_names().len() * SEEDS as usize);
        for r in &reports {
            assert!(
                r.passed(),
                "{} failed: max rel err {} > {} ({} checked, {} excluded)",
                r.name,
                r.max_rel_err,
                r.tolerance,
                r.checked,
                r.excluded
            );
            assert!(r.checked > 0, "{} probed nothing", r.name);
        }
    }

    #[test]
    fn broken_fixture_fails_and_is_hidden() {
        let settings = GradCheckSettings::default();
        let reports = run_op("selftest_broken", &settings).unwrap();
        assert!(reports.iter().all(|r| !r.passed()));
        assert!(!op_names().contains(&"selftest_broken"));
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(run_op("fused_everything", &GradCheckSettings::default()).is_err());
    }

}
