//! Central finite-difference checks of tape gradients.

use super::tape::{Tape, Var};
use super::params::{Params, Session};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences, for every entry of every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> Result<GradcheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    gradcheck_with(inputs, FD_STEP, f)
}

pub fn gradcheck_with<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.item(out))
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut vals = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = vals[i].data()[j];
            let mut at = |d: f64| -> Result<f64> {
                vals[i].data_mut()[j] = orig + d;
                eval(&vals)
            };
            // Fourth-order central stencil: truncation O(h⁴).
            let d1 = at(step)? - at(-step)?;
            let d2 = at(2.0 * step)? - at(-2.0 * step)?;
            vals[i].data_mut()[j] = orig;
            let numeric = (8.0 * d1 - d2) / (12.0 * step);
            let a = analytic.data()[j];
            let e = relative_error(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Gradient check over `extra` inputs followed by every tensor of `params`.
/// `f` receives a session binding the parameters and the `extra` variables.
pub fn gradcheck_params<F>(params: &Params, extra: &[Tensor], f: F) -> Result<GradcheckReport>
where
    F: Fn(&Session, &[Var]) -> Result<Var>,
{
    let k = extra.len();
    let mut inputs = extra.to_vec();
    inputs.extend(params.tensors().iter().cloned());
    gradcheck(&inputs, |t, v| {
        let s = Session::from_vars(t, v[k..].to_vec());
        f(&s, &v[..k])
    })
}
