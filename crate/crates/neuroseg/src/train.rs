//! Training loop: augmented batch assembly, compound or cross-entropy
//! loss with the progress-driven blend, Adam updates, periodic
//! validation with early stopping, and a line-per-iteration history.
//!
//! Determinism contract: every random draw comes from a ChaCha stream
//! addressed by (seed, purpose), and augmentation streams are addressed
//! by the global draw index, so the trajectory is a pure function of the
//! config regardless of batch assembly order.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use neuroseg_core::loss::{self, LossMode, Progress};
use neuroseg_core::ops::Phase;
use neuroseg_core::optim::{Adam, AdamConfig};
use neuroseg_core::state::StateEntry;
use neuroseg_core::tensor::Tensor;
use neuroseg_core::unet::Model;
use neuroseg_core::volume::{augment, augment_with, AugmentDraw, Sample};
use neuroseg_core::CoreError;

use crate::config::RunConfig;
use crate::dataset::NamedSample;
use crate::report::validation_metric;
use crate::{AppError, Result};

/// Stream ids for the per-purpose rngs; augmentation draws start above
/// `AUGMENT_BASE` addressed by global draw index.
const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const AUGMENT_BASE: u64 = 1000;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: u64,
    pub epoch: u64,
    /// Cross-entropy weight of the compound blend at this iteration;
    /// informational under pure cross-entropy mode.
    pub alpha: f64,
    pub loss: f64,
    pub bce: f64,
    pub skeleton: Option<f64>,
    /// Mean best-F1 over validation volumes; present on eval rounds.
    pub val_f1: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Best-validation snapshot, or the final state when no validation
    /// ran.
    pub state: Vec<StateEntry<f32>>,
    pub history: Vec<HistoryRecord>,
    pub best_val_f1: Option<f64>,
    pub iterations: u64,
}

fn identity_draw() -> AugmentDraw {
    AugmentDraw { flip_h: false, flip_w: false, quarter_turns: 0, origin: [0, 0, 0] }
}

fn cut_patch(s: &Sample, augmented: bool, rng: &mut ChaCha8Rng, patch: [usize; 3]) -> Result<Sample> {
    let out = if augmented {
        augment(s, rng, patch)?
    } else {
        augment_with(s, &identity_draw(), patch)?
    };
    Ok(out)
}

/// Maps a core failure inside the optimization step: non-finite values
/// become the NaN abort with its diagnostic, everything else is misuse.
fn step_error(e: CoreError, iteration: u64, alpha: f64, lr: f64) -> AppError {
    match e {
        CoreError::NonFinite { .. } => AppError::Nan { iteration, alpha, lr },
        other => AppError::Config(other.to_string()),
    }
}

pub fn train(cfg: &RunConfig, train_set: &[NamedSample], val_set: &[NamedSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model.to_core()?;
    let loss_cfg = cfg.loss.to_core()?;
    let tc = &cfg.train;
    if train_set.is_empty() {
        return Err(AppError::config("training set is empty".to_string()));
    }

    let n = train_set.len();
    let patch = cfg.data.patch;
    let patch_vol: usize = patch.iter().product();
    let iters_per_epoch = n.div_ceil(tc.batch_size);
    let total_iterations = (iters_per_epoch * tc.max_epochs) as u64;
    let epochs_planned = tc.max_epochs as u64;

    let mut model = Model::<f32>::new(model_cfg, &mut stream(cfg.seed, STREAM_INIT))?;
    let mut adam = Adam::new(AdamConfig {
        lr: tc.lr,
        weight_decay: tc.weight_decay,
        ..AdamConfig::default()
    })?;
    let mut order_rng = stream(cfg.seed, STREAM_ORDER);

    let mut history: Vec<HistoryRecord> = Vec::new();
    let mut best: Option<(f64, Vec<StateEntry<f32>>)> = None;
    let mut stale_rounds = 0usize;
    let mut it: u64 = 0;

    'epochs: for epoch in 1..=tc.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);

        for k in 0..iters_per_epoch {
            it += 1;
            let mut images: Vec<f32> = Vec::with_capacity(tc.batch_size * patch_vol);
            let mut labels: Vec<f32> = Vec::with_capacity(tc.batch_size * patch_vol);
            for j in 0..tc.batch_size {
                let idx = order[(k * tc.batch_size + j) % n];
                let draw_id = AUGMENT_BASE + (it - 1) * tc.batch_size as u64 + j as u64;
                let mut rng = stream(cfg.seed, draw_id);
                let cut = cut_patch(&train_set[idx].sample, cfg.data.augment, &mut rng, patch)?;
                images.extend(cut.image.as_f32_normalized());
                labels.extend(cut.label.as_binary()?.into_iter().map(f32::from));
            }

            // The blend weight is a pure function of the schedule; compute
            // it first so the NaN diagnostic can always report it.
            let progress = Progress {
                current_iteration: it - 1,
                total_iterations,
                epochs_planned,
            };
            let alpha = loss::alpha(loss::progress_ratio(&progress, &loss_cfg)?);

            let shape = [tc.batch_size, 1, patch[0], patch[1], patch[2]];
            let nan = |e: CoreError| step_error(e, it, alpha, tc.lr);
            let x = Tensor::from_vec(&shape, images).map_err(nan)?;
            let y = Tensor::from_vec(&shape, labels).map_err(nan)?;
            let logits = model.forward(&x, Phase::Train).map_err(nan)?;

            let (loss_t, bce, skeleton) = match loss_cfg.mode {
                LossMode::Compound => {
                    let terms = loss::compound_loss(&logits, &y, &progress, &loss_cfg).map_err(nan)?;
                    (terms.loss, terms.bce, terms.skeleton)
                }
                LossMode::CrossEntropyOnly => {
                    let t = loss::bce_loss(&logits, &y).map_err(nan)?;
                    let v = t.item().map_err(nan)?;
                    (t, f64::from(v), None)
                }
            };
            let loss_value = f64::from(loss_t.item().map_err(nan)?);
            loss_t.backward().map_err(nan)?;
            adam.step_with(|apply| {
                let mut failed = None;
                model.visit_params(&mut |p| {
                    if failed.is_none() {
                        if let Err(e) = apply(p) {
                            failed = Some(e);
                        }
                    }
                });
                failed.map_or(Ok(()), Err)
            })
            .map_err(nan)?;

            history.push(HistoryRecord {
                iteration: it,
                epoch: epoch as u64,
                alpha,
                loss: loss_value,
                bce,
                skeleton,
                val_f1: None,
            });

            if !val_set.is_empty() && it % tc.eval_every as u64 == 0 {
                let vf1 = validation_metric(&model, val_set, cfg.data.eval_patch, cfg.data.overlap)?;
                history.last_mut().expect("just pushed").val_f1 = Some(vf1);
                let improved = best.as_ref().map_or(true, |(b, _)| vf1 > *b);
                if improved {
                    best = Some((vf1, model.state_entries()));
                    stale_rounds = 0;
                } else {
                    stale_rounds += 1;
                    if stale_rounds >= tc.patience {
                        break 'epochs;
                    }
                }
            }
        }
    }

    let (best_val_f1, state) = match best {
        Some((v, st)) => (Some(v), st),
        None => (None, model.state_entries()),
    };
    Ok(TrainOutcome { state, history, best_val_f1, iterations: it })
}

/// Serializes history as line-delimited JSON.
pub fn history_jsonl(history: &[HistoryRecord]) -> String {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec).expect("history record serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use neuroseg_core::phantom::{synth_phantom, PhantomSpec};

    fn tiny_config(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.model.level_channels = vec![2, 4];
        cfg.model.bottleneck_channels = 8;
        cfg.model.gir = true;
        cfg.loss.skeleton_iters = 1;
        cfg.loss.schedule_epoch_knee = 4;
        cfg.loss.schedule_epoch_cap = 8;
        cfg.train.batch_size = 1;
        cfg.train.max_epochs = 8;
        cfg.train.eval_every = 4;
        cfg.train.patience = 3;
        cfg.data.patch = [16, 16, 16];
        cfg.data.eval_patch = [16, 16, 16];
        cfg.data.overlap = 0.0;
        cfg
    }

    fn tiny_set(count: usize, first_seed: u64) -> Vec<NamedSample> {
        (0..count)
            .map(|i| {
                let spec = PhantomSpec {
                    dims: [16, 16, 16],
                    branches: 3,
                    radius_range: (1.0, 2.0),
                    seed: first_seed + i as u64,
                    ..PhantomSpec::default()
                };
                NamedSample {
                    name: format!("t{i}"),
                    sample: synth_phantom(&spec).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn same_seed_reproduces_the_trajectory_byte_for_byte() {
        let cfg = tiny_config(5);
        let set = tiny_set(2, 10);
        let val = tiny_set(1, 90);
        let a = train(&cfg, &set, &val).unwrap();
        let b = train(&cfg, &set, &val).unwrap();
        assert_eq!(history_jsonl(&a.history), history_jsonl(&b.history));
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn zero_lr_keeps_every_parameter_bit_pattern() {
        let mut cfg = tiny_config(6);
        cfg.train.lr = 0.0;
        cfg.train.max_epochs = 3;
        let set = tiny_set(2, 20);
        let out = train(&cfg, &set, &[]).unwrap();

        let fresh = Model::<f32>::new(cfg.model.to_core().unwrap(), &mut stream(cfg.seed, STREAM_INIT))
            .unwrap();
        let reference = fresh.state_entries();
        assert_eq!(out.state.len(), reference.len());
        let mut params_compared = 0;
        for ((name, _, got), (rname, _, want)) in out.state.iter().zip(&reference) {
            assert_eq!(name, rname);
            // Normalization running estimates are buffers, not trained
            // parameters; they move in the forward pass regardless of lr.
            if name.contains("running_") {
                continue;
            }
            params_compared += 1;
            for (a, b) in got.iter().zip(want) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} drifted");
            }
        }
        assert!(params_compared > 10);
    }

    #[test]
    fn alpha_log_matches_schedule_and_starts_at_zero() {
        let cfg = tiny_config(7);
        let set = tiny_set(2, 30);
        let out = train(&cfg, &set, &[]).unwrap();
        let loss_cfg = cfg.loss.to_core().unwrap();
        let total = out.iterations;
        assert_eq!(out.history[0].alpha, 0.0);
        for rec in &out.history {
            let pr = Progress {
                current_iteration: rec.iteration - 1,
                total_iterations: total,
                epochs_planned: cfg.train.max_epochs as u64,
            };
            let expect = loss::alpha(loss::progress_ratio(&pr, &loss_cfg).unwrap());
            assert_eq!(rec.alpha, expect, "iteration {}", rec.iteration);
        }
    }

    #[test]
    fn cross_entropy_mode_trains_without_skeleton_terms() {
        let mut cfg = tiny_config(8);
        cfg.loss.mode = "cross_entropy".to_string();
        cfg.train.max_epochs = 2;
        let set = tiny_set(1, 40);
        let out = train(&cfg, &set, &[]).unwrap();
        assert!(out.history.iter().all(|r| r.skeleton.is_none()));
        assert!(out.history.iter().all(|r| (r.loss - r.bce).abs() < 1e-12));
    }

    #[test]
    fn two_hundred_iterations_cut_the_training_loss() {
        let mut cfg = tiny_config(12);
        cfg.loss.mode = "cross_entropy".to_string();
        cfg.train.max_epochs = 200;
        cfg.train.patience = 1000;
        // Patch == volume and no augmentation: every iteration optimizes
        // the exact same input, so the loss comparison is noise-free.
        cfg.data.augment = false;
        let set = tiny_set(1, 70);
        let out = train(&cfg, &set, &[]).unwrap();
        assert_eq!(out.iterations, 200);
        assert!(
            out.history[199].loss < out.history[0].loss,
            "loss went {} -> {}",
            out.history[0].loss,
            out.history[199].loss
        );
    }

    #[test]
    fn exploding_lr_aborts_with_the_nan_diagnostic() {
        let mut cfg = tiny_config(9);
        cfg.train.lr = 1e14;
        cfg.train.max_epochs = 50;
        let set = tiny_set(1, 50);
        let err = train(&cfg, &set, &[]).unwrap_err();
        match err {
            AppError::Nan { iteration, lr, .. } => {
                assert!(iteration >= 1);
                assert_eq!(lr, 1e14);
            }
            other => panic!("expected NaN abort, got {other}"),
        }
    }

    #[test]
    fn validation_runs_and_best_snapshot_is_kept() {
        let cfg = tiny_config(11);
        let set = tiny_set(2, 60);
        let val = tiny_set(1, 95);
        let out = train(&cfg, &set, &val).unwrap();
        let evals: Vec<f64> = out.history.iter().filter_map(|r| r.val_f1).collect();
        assert!(!evals.is_empty());
        let best_logged = evals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_val_f1, Some(best_logged));

        // Reloading the snapshot must reproduce the monitored value.
        let mut model =
            Model::<f32>::new(cfg.model.to_core().unwrap(), &mut stream(99, STREAM_INIT)).unwrap();
        let mut map = neuroseg_core::state::StateMap::new();
        for (name, shape, data) in &out.state {
            map.insert(name.clone(), (shape.clone(), data.clone()));
        }
        model.load_state(&mut map).unwrap();
        let again = validation_metric(&model, &val, cfg.data.eval_patch, cfg.data.overlap).unwrap();
        assert_eq!(again, best_logged);
    }
}
