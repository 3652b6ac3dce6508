//! Central finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences with the given `step`, for every coordinate of every input.
///
/// `f` is evaluated twice at the unperturbed point first; a mismatch means it
/// is not deterministic (e.g. dropout left on) and is reported as an error.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let base = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;

    let again = evaluate(&f, inputs)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape().to_vec());
        let analytic = grads.get(vars[ii]).unwrap_or(&zeros).clone();
        for c in 0..input.numel() {
            let x0 = input.data()[c];
            probe[ii].data_mut()[c] = x0 + step;
            let plus = evaluate(&f, &probe)?;
            probe[ii].data_mut()[c] = x0 - step;
            let minus = evaluate(&f, &probe)?;
            probe[ii].data_mut()[c] = x0;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((ii, c));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.value(out).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_f64(vec![3], &[0.3, -1.0, 2.0]).unwrap();
        let r = finite_diff_check(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &[x], 1e-4).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn nondeterministic_function_is_flagged() {
        let calls = Cell::new(0u32);
        let x = Tensor::from_f64(vec![1], &[1.0]).unwrap();
        let r = finite_diff_check(
            |t, v| {
                calls.set(calls.get() + 1);
                let s = t.sum_all(v[0]);
                Ok(t.add_scalar(s, f64::from(calls.get())))
            },
            &[x],
            1e-4,
        );
        assert!(matches!(r, Err(Error::NonDeterministic { .. })));
    }
}
