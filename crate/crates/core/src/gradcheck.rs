//! Central finite-difference oracle for tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Outcome of a gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares tape gradients of `f` at `inputs` with central differences
/// `(f(x+h) - f(x-h)) / 2h`, element by element over every input.
///
/// `f` must build a scalar from the leaves it is handed and be deterministic
/// (reseed any randomness inside it). Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check(f, inputs, step, Stencil::Three)
}

/// Same comparison with the fourth-order stencil
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`. Its truncation error is
/// small enough at `h ≈ 1e-3` that rounding stays negligible too, which
/// matters when deep graphs produce gradients many orders below the loss.
pub fn finite_diff_check_fine<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check(f, inputs, step, Stencil::Five)
}

#[derive(Clone, Copy)]
enum Stencil {
    Three,
    Five,
}

fn check<F>(f: F, inputs: &[Tensor], step: f64, stencil: Stencil) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &leaves)?;
        if loss.borrow().len() != 1 {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        tape.backward(loss)?;
        leaves.iter().map(|&l| tape.grad_or_zeros(l)).collect::<Vec<_>>()
    };

    let eval = |point: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let consts: Vec<Var<'_>> = point.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &consts)?.item())
    };

    let mut point = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (i, grad) in analytic.iter().enumerate() {
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                point[i].data_mut()[k] = orig + offset;
                let v = eval(&point);
                point[i].data_mut()[k] = orig;
                v
            };
            let numeric = match stencil {
                Stencil::Three => (at(step)? - at(-step)?) / (2.0 * step),
                Stencil::Five => {
                    (8.0 * (at(step)? - at(-step)?) - (at(2.0 * step)? - at(-2.0 * step)?)) / (12.0 * step)
                }
            };
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
