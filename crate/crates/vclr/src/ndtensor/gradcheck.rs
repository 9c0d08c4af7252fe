//! Finite-difference gradient checking. The numeric side only ever calls the
//! forward path on perturbed copies of the inputs, so it stays independent of
//! the reverse-mode code it is checking.

use super::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    /// Central-difference step.
    pub h: f64,
    /// Pass when |analytic - numeric| <= tol * max(1, |analytic|, |numeric|).
    pub tol: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { h: 1e-5, tol: 1e-4 }
    }
}

#[derive(Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_abs_diff: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares reverse-mode gradients of `f` (a scalar function of the inputs)
/// against central differences, element by element.
pub fn check<F>(
    inputs: &[Tensor],
    settings: GradCheckSettings,
    f: F,
) -> Result<GradReport, TensorError>
where
    F: Fn(&[Tensor]) -> Result<Tensor, TensorError>,
{
    let loss = f(inputs)?;
    for t in inputs {
        t.set_grad_zero();
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64, TensorError> { f(probe)?.item() };

    let mut report = GradReport {
        checked: 0,
        max_abs_diff: 0.0,
        mismatches: Vec::new(),
    };
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut probe: Vec<Tensor> = inputs.to_vec();
            let mut bumped = input.data().to_vec();
            bumped[j] += settings.h;
            probe[i] = Tensor::param(bumped, input.shape())?;
            let plus = eval(&probe)?;

            let mut bumped = input.data().to_vec();
            bumped[j] -= settings.h;
            probe[i] = Tensor::param(bumped, input.shape())?;
            let minus = eval(&probe)?;

            let numeric = (plus - minus) / (2.0 * settings.h);
            let a = analytic[i][j];
            let diff = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_diff = report.max_abs_diff.max(diff);
            if diff > settings.tol * 1.0f64.max(a.abs()).max(numeric.abs()) {
                report.mismatches.push(GradMismatch {
                    input: i,
                    element: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Panics with a readable message when any element disagrees.
pub fn assert_grads_match<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&[Tensor]) -> Result<Tensor, TensorError>,
{
    let report = check(inputs, GradCheckSettings::default(), f).expect("gradcheck forward failed");
    assert!(
        report.ok(),
        "{} of {} gradient elements disagree; worst: {:?} (max |diff| {:.3e})",
        report.mismatches.len(),
        report.checked,
        report.mismatches.first(),
        report.max_abs_diff,
    );
}
