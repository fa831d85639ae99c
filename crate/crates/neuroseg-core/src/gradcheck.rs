//! Finite-difference verification of analytic gradients.
//!
//! The harness rebuilds the graph from scratch for every probe, perturbing
//! one input element at a time with central differences in `f64`. Relative
//! error uses `max(|analytic|, |numeric|, 1)` as denominator so
//! zero-gradient components compare absolutely.
//!
//! Operators with index-switching behaviour (pooling argmax, relu at 0)
//! are only piecewise differentiable; callers feed inputs whose pairwise
//! value gaps exceed twice the probe step so no probe crosses a switch.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub mod suite;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    /// Central-difference probe step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { step: 1e-3, tolerance: 1e-4 }
    }
}

/// One input to the function under test.
#[derive(Debug, Clone)]
pub struct CheckInput {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Differentiable inputs become parameters and get probed; constants
    /// (labels, masks) are passed through unchanged.
    pub differentiable: bool,
}

impl CheckInput {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        CheckInput { shape: shape.to_vec(), data, differentiable: true }
    }

    pub fn constant(shape: &[usize], data: Vec<f64>) -> Self {
        CheckInput { shape: shape.to_vec(), data, differentiable: false }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Elements probed across all differentiable inputs.
    pub checked: usize,
    /// Elements skipped by the exclusion predicate.
    pub excluded: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Exclusion predicate: `(input index, element index, element value)`.
pub type Exclude<'a> = &'a dyn Fn(usize, usize, f64) -> bool;

type Build<'a> = &'a dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>;

fn make_leaves(inputs: &[CheckInput]) -> Result<Vec<Tensor<f64>>> {
    inputs
        .iter()
        .map(|inp| {
            if inp.differentiable {
                Tensor::parameter(&inp.shape, inp.data.clone())
            } else {
                Tensor::from_vec(&inp.shape, inp.data.clone())
            }
        })
        .collect()
}

fn eval_scalar(build: Build<'_>, inputs: &[CheckInput]) -> Result<f64> {
    let leaves = make_leaves(inputs)?;
    let out = build(&leaves)?;
    out.item()
}

/// Compares analytic gradients of `build` (a scalar-valued function of the
/// given inputs) against central finite differences.
pub fn check_gradients(
    name: &str,
    inputs: &[CheckInput],
    exclude: Option<Exclude<'_>>,
    build: Build<'_>,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    if !(settings.step > 0.0) || !(settings.tolerance > 0.0) {
        return Err(CoreError::config(format!(
            "gradcheck step and tolerance must be positive, got {} and {}",
            settings.step, settings.tolerance
        )));
    }

    // Analytic pass.
    let leaves = make_leaves(inputs)?;
    let out = build(&leaves)?;
    if out.len() != 1 {
        return Err(CoreError::shape(
            "gradcheck",
            format!("function under test must return a scalar, got {} elements", out.len()),
        ));
    }
    out.backward()?;
    let analytic: Vec<Option<Vec<f64>>> = leaves.iter().map(|l| l.grad()).collect();

    let h = settings.step;
    let mut max_rel_err = 0.0_f64;
    let mut checked = 0usize;
    let mut excluded = 0usize;

    let mut probe = inputs.to_vec();
    for (i, inp) in inputs.iter().enumerate() {
        if !inp.differentiable {
            continue;
        }
        for e in 0..inp.data.len() {
            if let Some(ex) = exclude {
                if ex(i, e, inp.data[e]) {
                    excluded += 1;
                    continue;
                }
            }
            let original = inp.data[e];
            probe[i].data[e] = original + h;
            let f_plus = eval_scalar(build, &probe)?;
            probe[i].data[e] = original - h;
            let f_minus = eval_scalar(build, &probe)?;
            probe[i].data[e] = original;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[i].as_ref().map_or(0.0, |g| g[e]);
            let denom = a.abs().max(numeric.abs()).max(1.0);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err,
        tolerance: settings.tolerance,
        checked,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn passes_on_a_correct_composite() {
        // f(x, y) = mean(sigmoid(x) * y + x^2)
        let report = check_gradients(
            "composite",
            &[
                CheckInput::new(&[4], alloc::vec![0.3, -0.7, 1.2, 0.05]),
                CheckInput::new(&[4], alloc::vec![1.0, 2.0, -0.5, 0.25]),
            ],
            None,
            &|leaves| {
                let s = ops::sigmoid(&leaves[0])?;
                let prod = ops::mul(&s, &leaves[1])?;
                let sq = ops::mul(&leaves[0], &leaves[0])?;
                ops::mean_all(&ops::add(&prod, &sq)?)
            },
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 8);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // Forward doubles, backward pretends to triple.
        let report = check_gradients(
            "broken",
            &[CheckInput::new(&[2], alloc::vec![0.4, -0.2])],
            None,
            &|leaves| {
                let x = &leaves[0];
                let data: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
                let nx = x.requires_grad();
                let doubled = Tensor::from_op(
                    "broken_double",
                    x.shape().to_vec(),
                    data,
                    alloc::vec![x.clone()],
                    move |g| alloc::vec![nx.then(|| g.iter().map(|v| 3.0 * v).collect())],
                )?;
                ops::sum_all(&doubled)
            },
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err > 0.3);
    }

    #[test]
    fn constants_are_not_probed() {
        let report = check_gradients(
            "with_constant",
            &[
                CheckInput::new(&[2], alloc::vec![0.5, 1.5]),
                CheckInput::constant(&[2], alloc::vec![2.0, 3.0]),
            ],
            None,
            &|leaves| ops::sum_all(&ops::mul(&leaves[0], &leaves[1])?),
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.passed());
    }

    #[test]
    fn exclusion_skips_elements() {
        let report = check_gradients(
            "excluded",
            &[CheckInput::new(&[3], alloc::vec![-1.0, 0.0, 1.0])],
            Some(&|_, _, v: f64| v.abs() < 0.5),
            &|leaves| ops::sum_all(&ops::relu(&leaves[0])?),
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 2);
        assert_eq!(report.excluded, 1);
        assert!(report.passed());
    }
}
