//! Evaluation reports: per-volume best-threshold metrics for the trained
//! model and the plain intensity-threshold baseline, emitted as JSON and
//! as an aligned text table (method, parameter count, per-image
//! precision/recall/F1, mean and standard deviation).

use serde::{Deserialize, Serialize};

use neuroseg_core::metrics::{default_thresholds, simple_threshold_baseline, threshold_sweep, SweepResult};
use neuroseg_core::predict::sliding_window_predict;
use neuroseg_core::unet::Model;
use neuroseg_core::volume::Sample;

use crate::dataset::NamedSample;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    /// Trainable parameter count; absent for parameterless baselines.
    pub params: Option<usize>,
    pub images: Vec<ImageMetrics>,
    pub mean: Summary,
    pub std: Summary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MethodReport>,
}

fn mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    values.sum::<f64>() / n as f64
}

/// Sample standard deviation (n-1 denominator); 0 for fewer than two
/// images.
fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values.clone());
    (values.map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

fn summarize(method: &str, params: Option<usize>, images: Vec<ImageMetrics>) -> MethodReport {
    let mean_s = Summary {
        precision: mean(images.iter().map(|i| i.precision)),
        recall: mean(images.iter().map(|i| i.recall)),
        f1: mean(images.iter().map(|i| i.f1)),
    };
    let std_s = Summary {
        precision: std_dev(images.iter().map(|i| i.precision)),
        recall: std_dev(images.iter().map(|i| i.recall)),
        f1: std_dev(images.iter().map(|i| i.f1)),
    };
    MethodReport { method: method.to_string(), params, images, mean: mean_s, std: std_s }
}

fn best_to_metrics(name: &str, sweep: &SweepResult) -> ImageMetrics {
    ImageMetrics {
        name: name.to_string(),
        threshold: sweep.best.threshold,
        precision: sweep.best.precision,
        recall: sweep.best.recall,
        f1: sweep.best.f1,
    }
}

/// Sliding-window probabilities for one sample followed by the sweep.
pub fn sweep_model(model: &Model<f32>, s: &Sample, patch: [usize; 3], overlap: f64) -> Result<SweepResult> {
    let image = s.image.as_f32_normalized();
    let probs = sliding_window_predict(model, &image, s.image.dims(), patch, overlap)?;
    let labels = s.label.as_binary()?;
    Ok(threshold_sweep(&probs, &labels, &default_thresholds())?)
}

/// Mean best-F1 over the given volumes; the quantity train monitors.
pub fn validation_metric(
    model: &Model<f32>,
    samples: &[NamedSample],
    patch: [usize; 3],
    overlap: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for ns in samples {
        total += sweep_model(model, &ns.sample, patch, overlap)?.best.f1;
    }
    Ok(total / samples.len() as f64)
}

pub fn model_report(
    model: &Model<f32>,
    samples: &[NamedSample],
    patch: [usize; 3],
    overlap: f64,
    params: usize,
) -> Result<MethodReport> {
    let mut images = Vec::with_capacity(samples.len());
    for ns in samples {
        let sweep = sweep_model(model, &ns.sample, patch, overlap)?;
        images.push(best_to_metrics(&ns.name, &sweep));
    }
    Ok(summarize("model", Some(params), images))
}

/// Thresholds raw image intensities directly; `samples` must carry
/// unsmoothed images.
pub fn baseline_report(samples: &[NamedSample]) -> Result<MethodReport> {
    let mut images = Vec::with_capacity(samples.len());
    for ns in samples {
        let image = ns.sample.image.as_f32_normalized();
        let labels = ns.sample.label.as_binary()?;
        let sweep = simple_threshold_baseline(&image, &labels, &default_thresholds())?;
        images.push(best_to_metrics(&ns.name, &sweep));
    }
    Ok(summarize("threshold", None, images))
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .flat_map(|r| r.images.iter().map(|i| i.name.len()))
            .chain(["mean ± std".len()])
            .max()
            .unwrap_or(10);
        let method_w = self.rows.iter().map(|r| r.method.len()).chain([6]).max().unwrap_or(6);

        let mut out = String::new();
        out.push_str(&format!(
            "{:<method_w$}  {:>9}  {:<name_w$}  {:>6}  {:>15}  {:>15}  {:>15}\n",
            "Method", "#Params", "Image", "Thresh", "Precision", "Recall", "F1"
        ));
        for row in &self.rows {
            let params = row.params.map_or_else(|| "-".to_string(), |p| p.to_string());
            for (k, img) in row.images.iter().enumerate() {
                let (m, p) = if k == 0 { (row.method.as_str(), params.as_str()) } else { ("", "") };
                out.push_str(&format!(
                    "{m:<method_w$}  {p:>9}  {:<name_w$}  {:>6.2}  {:>15.4}  {:>15.4}  {:>15.4}\n",
                    img.name, img.threshold, img.precision, img.recall, img.f1
                ));
            }
            out.push_str(&format!(
                "{:<method_w$}  {:>9}  {:<name_w$}  {:>6}  {:>8.4}±{:.4}  {:>8.4}±{:.4}  {:>8.4}±{:.4}\n",
                "",
                "",
                "mean ± std",
                "-",
                row.mean.precision,
                row.std.precision,
                row.mean.recall,
                row.std.recall,
                row.mean.f1,
                row.std.f1
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(name: &str, p: f64, r: f64, f: f64) -> ImageMetrics {
        ImageMetrics { name: name.into(), threshold: 0.5, precision: p, recall: r, f1: f }
    }

    #[test]
    fn summary_statistics_match_hand_values() {
        let rep = summarize("model", Some(10), vec![img("a", 0.8, 0.6, 0.7), img("b", 0.6, 0.8, 0.9)]);
        assert!((rep.mean.precision - 0.7).abs() < 1e-12);
        assert!((rep.mean.f1 - 0.8).abs() < 1e-12);
        // Sample std of {0.7, 0.9} = sqrt(2 * 0.01 / 1) ≈ 0.141421.
        assert!((rep.std.f1 - 0.1414213562373095).abs() < 1e-12);
    }

    #[test]
    fn single_image_std_is_zero() {
        let rep = summarize("threshold", None, vec![img("only", 1.0, 1.0, 1.0)]);
        assert_eq!(rep.std.f1, 0.0);
    }

    #[test]
    fn text_table_aligns_and_names_both_methods() {
        let report = EvalReport {
            rows: vec![
                summarize("model", Some(1433841), vec![img("vol_a", 0.9, 0.8, 0.85)]),
                summarize("threshold", None, vec![img("vol_a", 0.5, 0.4, 0.45)]),
            ],
        };
        let text = report.to_text();
        assert!(text.contains("Method"));
        assert!(text.contains("#Params"));
        assert!(text.contains("model"));
        assert!(text.contains("threshold"));
        assert!(text.contains("mean ± std"));
        let widths: Vec<usize> = text.lines().map(|l| l.chars().count()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "ragged table:\n{text}");
    }
}
