//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error with a floor on the denominator so that vanishing
/// gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h`, perturbing every input element.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    check_gradients_at(inputs, h, &all, f)
}

/// Like [`check_gradients`] but only perturbs the listed `(input, element)` pairs.
pub fn check_gradients_at<F>(inputs: &[Tensor], h: f64, coords: &[(usize, usize)], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.var(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for &(i, j) in coords {
        let analytic = grads.get(vars[i])?.data()[j];
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let up = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let down = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
        report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
        report.checked += 1;
    }
    Ok(report)
}
