//! Central finite-difference gradient checks.
//!
//! Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`;
//! the floor keeps vanishing gradients from inflating the ratio.

use crate::error::Result;
use crate::nn::{Ctx, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Where the largest error occurred.
    pub worst: String,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / scale
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_error(*a, *n))
        .fold(0.0, f64::max)
}

struct Worst {
    err: f64,
    at: String,
    checked: usize,
}

impl Worst {
    fn new() -> Self {
        Worst { err: 0.0, at: String::new(), checked: 0 }
    }

    fn push(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        let e = rel_error(analytic, numeric);
        if e > self.err || self.at.is_empty() {
            self.err = self.err.max(e);
            self.at = format!("{} (analytic {analytic:e}, numeric {numeric:e})", at());
        }
    }

    fn report(self) -> GradCheckReport {
        GradCheckReport { max_rel_error: self.err, checked: self.checked, worst: self.at }
    }
}

/// Checks the gradient of the scalar `f(inputs)` with respect to every entry
/// of every input.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    let mut worst = Worst::new();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for j in 0..input.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += eps;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] -= 2.0 * eps;
            let down = eval(&xs)?;
            worst.push(analytic.data()[j], (up - down) / (2.0 * eps), || format!("input {i}[{j}]"));
        }
    }
    Ok(worst.report())
}

/// Checks the gradient of a scalar model loss with respect to parameters.
///
/// With `max_per_param = Some(n)`, at most `n` evenly spaced entries of each
/// parameter tensor are probed; `None` probes every entry.
pub fn check_param_gradients<F>(
    params: &ParamStore,
    eps: f64,
    max_per_param: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Ctx<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let ctx = Ctx::train(&tape, params);
    let loss = f(&ctx)?;
    let grads = ctx.param_grads(&tape.backward(loss)?);
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, store);
        Ok(f(&ctx)?.value().item())
    };
    let mut worst = Worst::new();
    let mut probe = params.clone();
    for id in params.ids() {
        let n = params.get(id).len();
        let analytic = grads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(params.get(id).shape().to_vec()));
        let picks: Vec<usize> = match max_per_param {
            Some(m) if m < n => (0..m).map(|k| k * n / m).collect(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let orig = params.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            worst.push(analytic.data()[j], (up - down) / (2.0 * eps), || format!("{}[{j}]", params.name(id)));
        }
    }
    Ok(worst.report())
}
