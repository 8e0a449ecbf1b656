//! Central-difference gradient checking.

use crate::error::{MuserError, Result};

use super::matrix::Matrix;

/// Flat read/write access to every trainable scalar of a parameter set.
pub trait ParamSet: Clone {
    fn num_entries(&self) -> usize;
    fn entry(&self, index: usize) -> f64;
    fn set_entry(&mut self, index: usize, value: f64);
}

impl ParamSet for Matrix {
    fn num_entries(&self) -> usize {
        self.len()
    }

    fn entry(&self, index: usize) -> f64 {
        self.data()[index]
    }

    fn set_entry(&mut self, index: usize, value: f64) {
        self.data_mut()[index] = value;
    }
}

/// A scalar objective whose analytic gradient is available.
pub trait Objective<P: ParamSet> {
    fn loss(&self, params: &P) -> Result<f64>;

    /// Loss plus a gradient laid out like `params`.
    fn loss_and_grad(&self, params: &P) -> Result<(f64, P)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_entry: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `objective` with central differences
/// over every parameter entry.
pub fn grad_check<P: ParamSet, O: Objective<P>>(
    objective: &O,
    params: &P,
    eps: f64,
) -> Result<GradCheckReport> {
    let all: Vec<usize> = (0..params.num_entries()).collect();
    grad_check_entries(objective, params, eps, &all)
}

/// Like [`grad_check`] but restricted to the listed flat entries.
pub fn grad_check_entries<P: ParamSet, O: Objective<P>>(
    objective: &O,
    params: &P,
    eps: f64,
    entries: &[usize],
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(MuserError::invalid(format!(
            "grad_check eps must lie in [1e-6, 1e-3], got {eps}"
        )));
    }
    let (base, analytic) = objective.loss_and_grad(params)?;
    let again = objective.loss(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(MuserError::Numerical(format!(
            "loss is not deterministic: {base} then {again}"
        )));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_entry: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
    };
    let mut probe = params.clone();
    for &i in entries {
        if i >= params.num_entries() {
            return Err(MuserError::invalid(format!("entry {i} out of range")));
        }
        let x = params.entry(i);
        probe.set_entry(i, x + eps);
        let up = objective.loss(&probe)?;
        probe.set_entry(i, x - eps);
        let down = objective.loss(&probe)?;
        probe.set_entry(i, x);
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.entry(i);
        let rel = relative_error(a, numeric);
        if !rel.is_finite() {
            return Err(MuserError::NonFinite(format!("grad_check entry {i}")));
        }
        if rel > report.max_rel_err || report.entries_checked == 0 {
            report.max_rel_err = rel;
            report.worst_entry = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
        report.entries_checked += 1;
    }
    Ok(report)
}

/// Central-difference gradient of `f` at `at`.
pub fn central_difference(at: &Matrix, eps: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut probe = at.clone();
    let mut out = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.len() {
        let x = at.data()[i];
        probe.data_mut()[i] = x + eps;
        let up = f(&probe);
        probe.data_mut()[i] = x - eps;
        let down = f(&probe);
        probe.data_mut()[i] = x;
        out.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    out
}
