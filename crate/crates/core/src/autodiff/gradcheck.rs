//! Central finite-difference verification of analytic gradients.

use crate::autodiff::array::NdArray;
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Per-parameter outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Name of the parameter holding the worst entry.
    pub worst_param: String,
    pub worst_index: usize,
    pub per_param: Vec<(String, f64)>,
}

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Finite-difference formula used by [`grad_check_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error `O(h²)`.
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error `O(h⁴)`.
    /// Tolerates larger steps, which keeps rounding noise small on entries
    /// whose gradient is close to zero.
    FivePoint,
}

/// Compares the tape gradient of `f` with central differences of step `h`
/// on every entry of every parameter.
///
/// `f` records a scalar loss on the tape from leaves holding `params` and
/// returns it; it must be deterministic.
pub fn grad_check<F>(f: F, params: &[(String, NdArray<f64>)], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, params, h, Stencil::Central)
}

pub fn grad_check_with<F>(f: F, params: &[(String, NdArray<f64>)], h: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[NdArray<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, v)| tape.leaf(v.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }
    let grads = tape.backward(loss)?;

    let mut values: Vec<NdArray<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        per_param: Vec::with_capacity(params.len()),
    };
    for (p, (name, _)) in params.iter().enumerate() {
        let analytic = grads.get(&tape, vars[p]);
        let mut worst = 0.0f64;
        for i in 0..values[p].len() {
            let orig = values[p].data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                values[p].data_mut()[i] = orig + offset;
                eval(&values)
            };
            let numeric = match stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h),
            };
            values[p].data_mut()[i] = orig;
            let a = analytic.data()[i];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}[{i}]")));
            }
            let err = relative_error(a, numeric);
            worst = worst.max(err);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
        report.per_param.push((name.clone(), worst));
    }
    Ok(report)
}
