//! Run configuration: one JSON document is the single source of truth
//! for a training run; command-line flags only select files. Unknown
//! keys are rejected everywhere, and the fully resolved document
//! (defaults applied) is echoed into the run directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use neuroseg_core::loss::{LossConfig, LossMode};
use neuroseg_core::unet::{UNetConfig, UpsampleMode};

use crate::{AppError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub in_channels: usize,
    pub out_channels: usize,
    pub level_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub gir: bool,
    /// "transposed" or "nearest".
    pub upsample: String,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            in_channels: 1,
            out_channels: 1,
            level_channels: vec![16, 32, 64],
            bottleneck_channels: 128,
            gir: true,
            upsample: "transposed".to_string(),
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelSection {
    pub fn to_core(&self) -> Result<UNetConfig> {
        let upsample = match self.upsample.as_str() {
            "transposed" => UpsampleMode::Transposed,
            "nearest" => UpsampleMode::Nearest,
            other => {
                return Err(AppError::config(format!(
                    "model.upsample must be \"transposed\" or \"nearest\", got {other:?}"
                )))
            }
        };
        let cfg = UNetConfig {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            level_channels: self.level_channels.clone(),
            bottleneck_channels: self.bottleneck_channels,
            gir_enabled: self.gir,
            upsample,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// "compound" or "cross_entropy".
    pub mode: String,
    pub delta: f64,
    pub skeleton_iters: usize,
    pub schedule_epoch_knee: usize,
    pub schedule_epoch_cap: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            mode: "compound".to_string(),
            delta: 1.0,
            skeleton_iters: 5,
            schedule_epoch_knee: 200,
            schedule_epoch_cap: 300,
        }
    }
}

impl LossSection {
    pub fn to_core(&self) -> Result<LossConfig> {
        let mode = match self.mode.as_str() {
            "compound" => LossMode::Compound,
            "cross_entropy" => LossMode::CrossEntropyOnly,
            other => {
                return Err(AppError::config(format!(
                    "loss.mode must be \"compound\" or \"cross_entropy\", got {other:?}"
                )))
            }
        };
        let cfg = LossConfig {
            delta: self.delta,
            skeleton_iters: self.skeleton_iters,
            schedule_epoch_knee: self.schedule_epoch_knee,
            schedule_epoch_cap: self.schedule_epoch_cap,
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// Iterations between validation rounds.
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-3,
            weight_decay: 5e-4,
            batch_size: 8,
            patience: 20,
            max_epochs: 300,
            eval_every: 50,
        }
    }
}

impl TrainSection {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(AppError::config(format!("train.lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(AppError::config("train.weight_decay must be >= 0".to_string()));
        }
        for (name, v) in [
            ("train.batch_size", self.batch_size),
            ("train.patience", self.patience),
            ("train.max_epochs", self.max_epochs),
            ("train.eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(AppError::config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory of training volumes (one subdirectory per sample).
    pub train_root: String,
    /// Directory of validation volumes; empty disables validation and
    /// early stopping.
    pub val_root: String,
    /// Training patch [D, H, W]; volumes are zero-padded when smaller.
    pub patch: [usize; 3],
    /// Pre-filtering width applied to images (never labels); 0 disables.
    pub gaussian_sigma: f64,
    /// Random flips, H-W quarter turns, and random cropping. When off,
    /// patches are cut from the volume origin.
    pub augment: bool,
    /// Sliding-window tile for validation and evaluation.
    pub eval_patch: [usize; 3],
    /// Fractional tile overlap in [0, 0.9] for sliding-window inference.
    pub overlap: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_root: String::new(),
            val_root: String::new(),
            patch: [64, 128, 128],
            gaussian_sigma: 0.8,
            augment: true,
            eval_patch: [64, 128, 128],
            overlap: 0.5,
        }
    }
}

impl DataSection {
    pub fn validate(&self) -> Result<()> {
        if self.patch.iter().any(|&p| p == 0) || self.eval_patch.iter().any(|&p| p == 0) {
            return Err(AppError::config("data.patch and data.eval_patch must be positive".to_string()));
        }
        if !(0.0..=0.9).contains(&self.overlap) {
            return Err(AppError::config(format!("data.overlap must lie in [0, 0.9], got {}", self.overlap)));
        }
        if !(self.gaussian_sigma >= 0.0) {
            return Err(AppError::config("data.gaussian_sigma must be >= 0".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub data: DataSection,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| AppError::config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| AppError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-section checks beyond per-field ranges: patches must be
    /// tileable by the network's downsampling pyramid.
    pub fn validate(&self) -> Result<()> {
        let model = self.model.to_core()?;
        self.loss.to_core()?;
        self.train.validate()?;
        self.data.validate()?;
        let mult = model.spatial_multiple();
        for (name, patch) in [("data.patch", self.data.patch), ("data.eval_patch", self.data.eval_patch)] {
            if patch.iter().any(|&p| p % mult != 0) {
                return Err(AppError::config(format!(
                    "{name} {patch:?} must be divisible by {mult} (the network downsamples {} times)",
                    model.level_channels.len()
                )));
            }
        }
        Ok(())
    }

    /// Writes the defaults-applied document to `dir/config.resolved.json`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut doc = serde_json::to_string_pretty(self)?;
        doc.push('\n');
        fs::write(dir.join("config.resolved.json"), doc)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.train.batch_size, 8);
        assert_eq!(back.data.patch, [64, 128, 128]);
        assert_eq!(back.loss.schedule_epoch_knee, 200);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"verbose": true}"#,
            r#"{"model": {"dropout": 0.5}}"#,
            r#"{"train": {"momentum": 0.9}}"#,
            r#"{"loss": {"gamma": 2}}"#,
            r#"{"data": {"cache": "disk"}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfig>(doc).is_err(), "accepted {doc}");
        }
    }

    #[test]
    fn partial_documents_inherit_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"train": {"lr": 0.01}, "model": {"gir": false}}"#).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.weight_decay, 5e-4);
        assert!(!cfg.model.gir);
        assert_eq!(cfg.model.bottleneck_channels, 128);
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.overlap = 0.95;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.data.patch = [30, 64, 64];
        assert!(cfg.validate().unwrap_err().to_string().contains("divisible"));

        let mut cfg = RunConfig::default();
        cfg.model.upsample = "trilinear".to_string();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.train.lr = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.loss.mode = "dice".to_string();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resolved_config_is_reloadable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        cfg.write_resolved(dir.path()).unwrap();
        let back = RunConfig::from_file(&dir.path().join("config.resolved.json")).unwrap();
        assert_eq!(back.model.level_channels, vec![16, 32, 64]);
    }
}
