//! Central finite-difference gradient checking against the tape.

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Largest disagreement found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a small absolute floor so that entries whose true
/// gradient is zero do not divide by zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        diff / 1e-7
    } else {
        diff / scale
    }
}

/// Compares tape gradients of `loss_fn` with central differences of step
/// `h` for every trainable parameter in `params`. At most `max_per_param`
/// entries per tensor are probed, evenly spaced.
pub fn check_gradients<F>(
    params: &mut ParamStore<f64>,
    h: f64,
    max_per_param: usize,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(params);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |params: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(params);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.data(loss)[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = params
        .iter()
        .enumerate()
        .filter(|(_, (_, t))| t.trainable())
        .map(|(i, _)| super::ParamId(i))
        .collect();
    for id in ids {
        let len = params.get(id).len();
        let stride = len.div_ceil(max_per_param.max(1)).max(1);
        let analytic_all = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        for e in (0..len).step_by(stride) {
            let orig = params.get(id).data()[e];
            params.get_mut(id).data_mut()[e] = orig + h;
            let fp = eval(params)?;
            params.get_mut(id).data_mut()[e] = orig - h;
            let fm = eval(params)?;
            params.get_mut(id).data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = analytic_all[e];
            let rel = relative_error(analytic, numeric);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = params.name(id).to_string();
                report.worst_index = e;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
