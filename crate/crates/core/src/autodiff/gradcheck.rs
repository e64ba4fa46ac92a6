use crate::error::{ensure, Result};

use super::{Tape, Tensor, Value};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose probes changed a discrete branch (ReLU mask,
    /// max-pool winner, neighbour choice) and were therefore skipped.
    pub excluded: usize,
}

/// Compares the tape gradient of `f` at `point` against central differences
/// on every coordinate.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, Value) -> Result<Value>,
{
    let all: Vec<usize> = (0..point.len()).collect();
    finite_diff_check_coords(f, point, step, &all)
}

/// As [`finite_diff_check`], restricted to the listed flat coordinates.
pub fn finite_diff_check_coords<F>(f: F, point: &Tensor, step: f64, coords: &[usize]) -> Result<FdReport>
where
    F: Fn(&mut Tape, Value) -> Result<Value>,
{
    ensure(step > 0.0, || format!("finite-difference step must be positive, got {step}"))?;
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x)?;
    let base_sig = tape.signature();
    let analytic = tape.backward(loss)?.get(x);

    let eval = |p: Tensor| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let v = t.constant(p);
        let out = f(&mut t, v)?;
        Ok((t.value(out).data()[0], t.signature()))
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        if sp != base_sig || sm != base_sig {
            report.excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
