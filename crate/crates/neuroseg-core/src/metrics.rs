//! Voxelwise precision/recall/F1 over probability thresholds.
//!
//! A voxel counts as predicted foreground when its probability is at or
//! above the threshold. Every rate uses the 0/0 -> 0 convention so empty
//! predictions and empty labels stay well defined.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// One record per threshold, ascending.
    pub records: Vec<MetricsRecord>,
    /// Highest F1; ties resolve to the lower threshold.
    pub best: MetricsRecord,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// The 19-value grid 0.05, 0.10, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Counts TP/FP/FN of `prob >= t` against a binary label per threshold.
pub fn threshold_sweep(prob: &[f32], label: &[u8], thresholds: &[f64]) -> Result<SweepResult> {
    if prob.len() != label.len() {
        return Err(CoreError::shape(
            "threshold_sweep",
            format!("probabilities ({}) and label ({}) differ", prob.len(), label.len()),
        ));
    }
    if thresholds.is_empty() {
        return Err(CoreError::config("at least one threshold is required"));
    }
    if thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(CoreError::config("thresholds must lie strictly inside (0, 1)"));
    }
    if label.iter().any(|&b| b > 1) {
        return Err(CoreError::data("labels must be 0 or 1"));
    }

    let mut sorted = thresholds.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("validated finite"));

    let mut records = Vec::with_capacity(sorted.len());
    for &t in &sorted {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&p, &l) in prob.iter().zip(label) {
            let pred = p as f64 >= t;
            match (pred, l == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        records.push(MetricsRecord {
            threshold: t,
            precision,
            recall,
            f1: f1_score(precision, recall),
            true_pos: tp,
            false_pos: fp,
            false_neg: fn_,
        });
    }
    let best = *records
        .iter()
        .reduce(|best, r| if r.f1 > best.f1 { r } else { best })
        .expect("records non-empty");
    Ok(SweepResult { records, best })
}

/// The sweep applied to raw image intensities instead of model output:
/// the plain-thresholding reference any learned model has to beat.
pub fn simple_threshold_baseline(
    image: &[f32],
    label: &[u8],
    thresholds: &[f64],
) -> Result<SweepResult> {
    if image.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(CoreError::data("baseline image must lie in [0, 1]"));
    }
    threshold_sweep(image, label, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_binary_probabilities_score_one_everywhere() {
        let label = vec![1u8, 0, 1, 0, 0, 1];
        let prob: Vec<f32> = label.iter().map(|&b| b as f32).collect();
        let sweep = threshold_sweep(&prob, &label, &default_thresholds()).unwrap();
        for r in &sweep.records {
            assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(sweep.best.f1, 1.0);
    }

    #[test]
    fn hand_counted_example() {
        // pred [1,0,0,0,1] vs label [1,1,1,1,0]: TP=1, FP=1, FN=3.
        let prob = vec![0.9f32, 0.1, 0.2, 0.3, 0.8];
        let label = vec![1u8, 1, 1, 1, 0];
        let sweep = threshold_sweep(&prob, &label, &[0.5]).unwrap();
        let r = sweep.records[0];
        assert_eq!((r.true_pos, r.false_pos, r.false_neg), (1, 1, 3));
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.25);
        assert!((r.f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn published_precision_recall_pair_reproduces_f1() {
        let f1 = f1_score(0.3371, 0.5358);
        assert!((f1 - 0.4138).abs() < 5e-4, "got {f1}");
    }

    #[test]
    fn zero_denominators_collapse_to_zero() {
        assert_eq!(f1_score(0.0, 0.0), 0.0);
        let sweep = threshold_sweep(&[0.0f32, 0.0], &[0u8, 0], &[0.5]).unwrap();
        let r = sweep.records[0];
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ties_pick_the_lower_threshold() {
        let prob = vec![0.2f32, 0.8];
        let label = vec![0u8, 1];
        let sweep = threshold_sweep(&prob, &label, &[0.75, 0.25, 0.5]).unwrap();
        assert_eq!(sweep.best.f1, 1.0);
        assert_eq!(sweep.best.threshold, 0.25);
    }

    #[test]
    fn sweep_matches_brute_force_oracle_on_random_volumes() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 8 * 8 * 8;
            let prob: Vec<f32> = (0..n).map(|_| rng.gen::<f32>()).collect();
            let label: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.3))).collect();
            let thresholds = default_thresholds();
            let sweep = threshold_sweep(&prob, &label, &thresholds).unwrap();

            let mut best_f1 = -1.0f64;
            for (i, &t) in thresholds.iter().enumerate() {
                let mut counts = [0u64; 4];
                for v in 0..n {
                    let pred = prob[v] as f64 >= t;
                    let pos = label[v] == 1;
                    let idx = usize::from(pred) * 2 + usize::from(pos);
                    counts[idx] += 1;
                }
                let (tp, fp, fn_) = (counts[3], counts[2], counts[1]);
                let r = sweep.records[i];
                assert_eq!((r.true_pos, r.false_pos, r.false_neg), (tp, fp, fn_));
                let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
                let rec = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
                let f1 = if p + rec == 0.0 { 0.0 } else { 2.0 * p * rec / (p + rec) };
                assert!((r.f1 - f1).abs() < 1e-12);
                assert!((r.f1 - f1_score(r.precision, r.recall)).abs() < 1e-9);
                best_f1 = best_f1.max(f1);
            }
            assert!((sweep.best.f1 - best_f1).abs() < 1e-12);
        }
    }

    #[test]
    fn complement_sweep_mirrors_counts() {
        // Classifying 1-prob against 1-label at t swaps the roles of the
        // positive counts with the negatives at the mirrored threshold.
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 8 * 8 * 8;
            let prob: Vec<f32> = (0..n).map(|_| rng.gen::<f32>()).collect();
            let label: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
            let t = 0.37;

            let fwd = threshold_sweep(&prob, &label, &[t]).unwrap().records[0];
            let comp_prob: Vec<f32> = prob.iter().map(|&p| 1.0 - p).collect();
            let comp_label: Vec<u8> = label.iter().map(|&l| 1 - l).collect();
            let rev = threshold_sweep(&comp_prob, &comp_label, &[1.0 - t]).unwrap().records[0];

            let tn = n as u64 - fwd.true_pos - fwd.false_pos - fwd.false_neg;
            assert_eq!(rev.true_pos, tn);
            assert_eq!(rev.false_pos, fwd.false_neg);
            assert_eq!(rev.false_neg, fwd.false_pos);
        }
    }

    #[test]
    fn baseline_is_the_same_machinery_on_intensities() {
        let label = vec![1u8, 0, 1, 0];
        let image = vec![1.0f32, 0.0, 1.0, 0.0];
        let sweep = simple_threshold_baseline(&image, &label, &default_thresholds()).unwrap();
        assert_eq!(sweep.best.f1, 1.0);
        assert!(simple_threshold_baseline(&[1.5f32], &[1u8], &[0.5]).is_err());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(threshold_sweep(&[0.5f32], &[0u8, 1], &[0.5]).is_err());
        assert!(threshold_sweep(&[0.5f32], &[0u8], &[]).is_err());
        assert!(threshold_sweep(&[0.5f32], &[0u8], &[0.0]).is_err());
        assert!(threshold_sweep(&[0.5f32], &[0u8], &[1.0]).is_err());
        assert!(threshold_sweep(&[0.5f32], &[2u8], &[0.5]).is_err());
    }
}
