//! Central finite-difference gradient checking.
//!
//! The checker never looks at the tape's backward pass: it re-evaluates the
//! forward closure at `x +- h` per element and compares the quotient against
//! the analytic grad. Always runs in `f64`; the default step is 1e-4, which
//! leaves truncation error around 1e-8, far below the 1e-4 acceptance bar.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, ValueId};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub elements_checked: usize,
}

impl GradReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a unit floor, so tiny gradients are compared
/// absolutely and large ones proportionally.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Checks analytic gradients of `eval` against central differences for every
/// element of every named parameter.
///
/// `eval` receives a fresh tape plus one differentiable leaf per parameter
/// (same order) and must return a scalar loss. It is called once for the
/// analytic pass and twice per element for the numeric pass, so keep the
/// model small.
pub fn check_gradients<F>(
    params: &[(String, Tensor<f64>)],
    step: f64,
    mut eval: F,
) -> Result<GradReport>
where
    F: FnMut(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    if params.is_empty() {
        return Err(Error::invalid("check_gradients: no parameters given"));
    }
    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = work.iter().map(|(_, t)| tape.param(t)).collect();
    let loss = eval(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    drop(tape);

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        elements_checked: 0,
    };

    for pi in 0..work.len() {
        let n = work[pi].1.numel();
        let grad = if analytic[pi].is_empty() {
            vec![0.0; n]
        } else {
            analytic[pi].clone()
        };
        for ei in 0..n {
            let orig = work[pi].1.data()[ei];

            work[pi].1.data_mut()[ei] = orig + step;
            let plus = eval_loss(&work, &mut eval)?;
            work[pi].1.data_mut()[ei] = orig - step;
            let minus = eval_loss(&work, &mut eval)?;
            work[pi].1.data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_err(grad[ei], numeric);
            report.elements_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = work[pi].0.clone();
                report.worst_index = ei;
            }
        }
    }
    Ok(report)
}

fn eval_loss<F>(params: &[(String, Tensor<f64>)], eval: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|(_, t)| tape.param(t)).collect();
    let loss = eval(&mut tape, &ids)?;
    tape.value(loss).item()
}
