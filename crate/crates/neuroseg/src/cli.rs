//! Subcommand dispatch. Exit codes: 0 success, 1 failed verification
//! checks, 2 config/file problems, 3 NaN abort during training. All run
//! state comes from config files and flags; no environment variables are
//! consulted.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use neuroseg_core::gir::GirConfig;
use neuroseg_core::gradcheck::{suite, GradCheckSettings};
use neuroseg_core::phantom::{synth_phantom, PhantomSpec};
use neuroseg_core::predict::{max_projection, sliding_window_predict};
use neuroseg_core::state::StateMap;
use neuroseg_core::unet::Model;
use neuroseg_core::volume::Volume;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_dir, normalize_image};
use crate::pgm::write_pgm;
use crate::report::{baseline_report, model_report, EvalReport};
use crate::train::{history_jsonl, stream, train};
use crate::volume_io::{load_volume, save_volume};
use crate::{AppError, Result};

#[derive(Parser)]
#[command(name = "neuroseg", about = "3D tubular-structure segmentation toolkit", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config; writes the resolved config,
    /// history.jsonl, and checkpoint/ into the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a training run on a dataset; writes JSON and text reports.
    Eval {
        /// Run directory produced by train (holds config.resolved.json
        /// and checkpoint/).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict a probability volume for one input volume.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify operator gradients against central finite differences.
    Gradcheck {
        /// One operator by name (see --all for the full list).
        #[arg(long, conflicts_with = "all")]
        op: Option<String>,
        /// Run every operator in the suite.
        #[arg(long)]
        all: bool,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Generate a deterministic synthetic phantom dataset.
    Synth {
        /// JSON phantom spec; generated sample i uses seed spec.seed + i.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a maximum-intensity projection as an 8-bit PGM.
    Project {
        #[arg(long)]
        volume: PathBuf,
        /// depth, height, or width.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter counts with and without the reasoning block.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval { checkpoint, data, report } => cmd_eval(&checkpoint, &data, &report),
        Command::Predict { checkpoint, volume, out } => cmd_predict(&checkpoint, &volume, &out),
        Command::Gradcheck { op, all, tol } => cmd_gradcheck(op.as_deref(), all, tol),
        Command::Synth { spec, count, out } => cmd_synth(&spec, count, &out),
        Command::Project { volume, axis, out } => cmd_project(&volume, &axis, &out),
        Command::Params { config } => cmd_params(&config),
    }
}

fn cmd_train(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    if cfg.data.train_root.is_empty() {
        return Err(AppError::config("data.train_root is required for training".to_string()));
    }
    let train_set = load_dir(Path::new(&cfg.data.train_root), cfg.data.gaussian_sigma)?;
    let val_set = if cfg.data.val_root.is_empty() {
        Vec::new()
    } else {
        load_dir(Path::new(&cfg.data.val_root), cfg.data.gaussian_sigma)?
    };

    cfg.write_resolved(out)?;
    let outcome = train(&cfg, &train_set, &val_set)?;
    fs::write(out.join("history.jsonl"), history_jsonl(&outcome.history))?;
    save_checkpoint(&outcome.state, &out.join("checkpoint"))?;

    println!("trained {} iterations over {} volumes", outcome.iterations, train_set.len());
    match outcome.best_val_f1 {
        Some(v) => println!("best validation F1: {v:.4}"),
        None => println!("no validation volumes configured"),
    }
    Ok(())
}

/// Rebuilds the trained model from a run directory: architecture from the
/// resolved config, weights from the checkpoint.
pub fn load_run_model(run_dir: &Path) -> Result<(RunConfig, Model<f32>)> {
    let cfg = RunConfig::from_file(&run_dir.join("config.resolved.json"))?;
    let entries = load_checkpoint(&run_dir.join("checkpoint"))?;
    let mut map = StateMap::new();
    for (name, shape, data) in entries {
        if map.insert(name.clone(), (shape, data)).is_some() {
            return Err(AppError::config(format!("checkpoint lists {name} twice")));
        }
    }
    let mut model = Model::<f32>::new(cfg.model.to_core()?, &mut stream(0, 0))?;
    model.load_state(&mut map)?;
    Ok((cfg, model))
}

fn cmd_eval(run_dir: &Path, data: &Path, report_path: &Path) -> Result<()> {
    let (cfg, model) = load_run_model(run_dir)?;
    let smoothed = load_dir(data, cfg.data.gaussian_sigma)?;
    let raw = load_dir(data, 0.0)?;

    let report = EvalReport {
        rows: vec![
            model_report(&model, &smoothed, cfg.data.eval_patch, cfg.data.overlap, model.param_count())?,
            baseline_report(&raw)?,
        ],
    };

    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut doc = serde_json::to_string_pretty(&report)?;
    doc.push('\n');
    fs::write(report_path, doc)?;
    let text = report.to_text();
    fs::write(report_path.with_extension("txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_predict(run_dir: &Path, volume: &Path, out: &Path) -> Result<()> {
    let (cfg, model) = load_run_model(run_dir)?;
    let raw = load_volume(volume)?;
    let mut image = normalize_image(&raw);
    if cfg.data.gaussian_sigma > 0.0 {
        image = neuroseg_core::volume::gaussian3d(&image, cfg.data.gaussian_sigma)?;
    }
    let dims = image.dims();
    let probs = sliding_window_predict(&model, &image.as_f32_normalized(), dims, cfg.data.eval_patch, cfg.data.overlap)?;
    save_volume(&Volume::from_f32(dims, probs)?, out)?;
    println!("wrote probability volume {}", out.display());
    Ok(())
}

fn cmd_gradcheck(op: Option<&str>, all: bool, tol: f64) -> Result<()> {
    if !(tol > 0.0) {
        return Err(AppError::config(format!("--tol must be positive, got {tol}")));
    }
    let settings = GradCheckSettings { tolerance: tol, ..GradCheckSettings::default() };
    let reports = match (op, all) {
        (Some(name), false) => suite::run_op(name, &settings)?,
        (None, true) => suite::run_all(&settings)?,
        _ => return Err(AppError::config("pass --op NAME or --all".to_string())),
    };

    // One line per operator: worst relative error across its seeded shapes.
    let mut failures = Vec::new();
    let mut current: Option<(String, f64, bool)> = None;
    let flush = |entry: &mut Option<(String, f64, bool)>, failures: &mut Vec<String>| {
        if let Some((name, worst, ok)) = entry.take() {
            println!("{name:<18} max rel err {worst:9.3e}  {}", if ok { "ok" } else { "FAIL" });
            if !ok {
                failures.push(name);
            }
        }
    };
    for r in &reports {
        let base = r.name.split('#').next().unwrap_or(&r.name).to_string();
        match &mut current {
            Some((name, worst, ok)) if *name == base => {
                *worst = worst.max(r.max_rel_err);
                *ok = *ok && r.passed();
            }
            _ => {
                flush(&mut current, &mut failures);
                current = Some((base, r.max_rel_err, r.passed()));
            }
        }
    }
    flush(&mut current, &mut failures);

    if failures.is_empty() {
        println!("gradcheck: all operators within {tol:e}");
        Ok(())
    } else {
        Err(AppError::Check(format!("gradient check failed for: {}", failures.join(", "))))
    }
}

/// On-disk phantom spec; `radius_range` is `[low, high]`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SpecDoc {
    dims: [usize; 3],
    branches: usize,
    radius_range: (f64, f64),
    noise_sigma: f64,
    gap_probability: f64,
    seed: u64,
}

impl Default for SpecDoc {
    fn default() -> Self {
        let d = PhantomSpec::default();
        SpecDoc {
            dims: d.dims,
            branches: d.branches,
            radius_range: d.radius_range,
            noise_sigma: d.noise_sigma,
            gap_probability: d.gap_probability,
            seed: d.seed,
        }
    }
}

fn cmd_synth(spec_path: &Path, count: usize, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| AppError::config(format!("{}: {e}", spec_path.display())))?;
    let doc: SpecDoc = serde_json::from_str(&text)
        .map_err(|e| AppError::config(format!("{}: {e}", spec_path.display())))?;
    if count == 0 {
        return Err(AppError::config("--count must be at least 1".to_string()));
    }
    for i in 0..count {
        let spec = PhantomSpec {
            dims: doc.dims,
            branches: doc.branches,
            radius_range: doc.radius_range,
            noise_sigma: doc.noise_sigma,
            gap_probability: doc.gap_probability,
            seed: doc.seed + i as u64,
        };
        let sample = synth_phantom(&spec)?;
        let dir = out.join(format!("phantom_{i:03}"));
        save_volume(&sample.image, &dir.join("image"))?;
        save_volume(&sample.label, &dir.join("label"))?;
    }
    println!("wrote {count} phantoms under {}", out.display());
    Ok(())
}

fn cmd_project(volume: &Path, axis: &str, out: &Path) -> Result<()> {
    let axis_idx = match axis {
        "depth" => 0,
        "height" => 1,
        "width" => 2,
        other => {
            return Err(AppError::config(format!(
                "--axis must be depth, height, or width, got {other:?}"
            )))
        }
    };
    let vol = load_volume(volume)?;
    let data = vol.as_f32_normalized();
    let (rows, cols, proj) = max_projection(&data, vol.dims(), axis_idx)?;
    write_pgm(out, rows, cols, &proj)?;
    println!("wrote {}x{} projection {}", cols, rows, out.display());
    Ok(())
}

fn cmd_params(config: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let mut base = cfg.model.to_core()?;
    base.gir_enabled = false;
    let mut with_gir = base.clone();
    with_gir.gir_enabled = true;

    let rng = || rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let base_count = Model::<f32>::new(base, &mut rng())?.param_count();
    let gir_count = Model::<f32>::new(with_gir, &mut rng())?.param_count();
    let added = gir_count - base_count;
    debug_assert_eq!(added, GirConfig::from_channels(cfg.model.bottleneck_channels)?.param_count());
    let overhead = 100.0 * added as f64 / base_count as f64;

    println!("parameters_without_gir: {base_count}");
    println!("parameters_with_gir: {gir_count}");
    println!("gir_parameters: {added}");
    println!("gir_overhead_percent: {overhead:.2}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_doc_defaults_match_the_core_defaults() {
        let doc: SpecDoc = serde_json::from_str("{}").unwrap();
        let core = PhantomSpec::default();
        assert_eq!(doc.dims, core.dims);
        assert_eq!(doc.radius_range, core.radius_range);
        assert_eq!(doc.gap_probability, core.gap_probability);
    }

    #[test]
    fn spec_doc_rejects_unknown_keys() {
        assert!(serde_json::from_str::<SpecDoc>(r#"{"tortuosity": 2}"#).is_err());
    }
}
