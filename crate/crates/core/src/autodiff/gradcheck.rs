//! Central finite differences against tape gradients.

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so that vanishing gradients do not divide by zero.
pub const RELATIVE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    /// Set when any function evaluation or gradient was NaN/Inf.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite && self.entries.iter().all(|e| !e.flagged)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }
}

/// Compares `d f / d point` from the tape against
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
///
/// `f` receives a fresh tape and the leaf holding the input, and must return
/// a scalar node.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let root = f(&mut tape, x)?;
    let grads = tape.backward(root)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p, false);
        let root = f(&mut tape, x)?;
        Ok(tape.value(root).item())
    };

    let mut non_finite = !tape.value(root).is_finite() || !analytic.is_finite();
    let mut entries = Vec::with_capacity(point.len());
    let mut max_relative_error: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let finite = numeric.is_finite() && a.is_finite();
        non_finite |= !finite;
        let relative_error = if finite {
            (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
        } else {
            f64::INFINITY
        };
        max_relative_error = max_relative_error.max(relative_error);
        entries.push(GradCheckEntry {
            index: i,
            analytic: a,
            numeric,
            relative_error,
            flagged: !(relative_error <= tolerance),
        });
    }
    Ok(GradCheckReport {
        entries,
        max_relative_error,
        tolerance,
        non_finite,
    })
}
