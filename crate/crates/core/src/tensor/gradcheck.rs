//! Central finite-difference check of tape gradients.
//!
//! Analytic gradients come from an `f32` backward pass; the reference
//! derivatives from a 64-bit replay of the same graph, so cancellation in
//! the difference quotient cannot hide a wrong backward rule.

use super::{Element, Tape, Tensor, Var};
use crate::error::Result;

/// Default central-difference step.
pub const STEP: f64 = 1e-3;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms.
pub const REL_FLOOR: f64 = 1e-4;

/// A scalar loss that can be recorded at any precision.
pub trait ShadowLoss {
    fn record<T: Element>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Coordinates skipped because the perturbation flipped a relu.
    pub skipped_kinks: usize,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Analytic `f32` gradients of `loss` at `params`.
pub fn analytic_gradients<L: ShadowLoss>(loss: &L, params: &[Tensor]) -> Result<(f32, Vec<Vec<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = loss.record(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    tape.backward(out)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    Ok((value, grads))
}

fn shadow_eval<L: ShadowLoss>(loss: &L, params: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::<f64>::new();
    let vars = params
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = loss.record(&mut tape, &vars)?;
    Ok((tape.value(out).item()?, tape.relu_pattern()))
}

/// Compares every coordinate of every parameter against a central
/// difference with step `h`.
pub fn check<L: ShadowLoss>(loss: &L, params: &[Tensor], h: f64) -> Result<GradCheckReport> {
    let (_, analytic) = analytic_gradients(loss, params)?;
    let mut shadow: Vec<Tensor<f64>> = params.iter().map(|p| p.cast()).collect();
    let (_, base_pattern) = shadow_eval(loss, &shadow)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0, skipped_kinks: 0 };
    for pi in 0..shadow.len() {
        for ei in 0..shadow[pi].len() {
            let orig = shadow[pi].data()[ei];
            shadow[pi].data_mut()[ei] = orig + h;
            let (plus, pat_plus) = shadow_eval(loss, &shadow)?;
            shadow[pi].data_mut()[ei] = orig - h;
            let (minus, pat_minus) = shadow_eval(loss, &shadow)?;
            shadow[pi].data_mut()[ei] = orig;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[pi][ei] as f64, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, ei);
            }
        }
    }
    Ok(report)
}
