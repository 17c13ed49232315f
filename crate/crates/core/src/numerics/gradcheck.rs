//! Central finite differences against analytic gradients.

use num_traits::Float;

use super::params::ParamTree;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Default step for `f32` parameters.
pub const DEFAULT_EPS_F32: f64 = 1e-3;

/// Step used by the `f64` checks in this crate.
pub const DEFAULT_EPS_F64: f64 = 1e-6;

/// Central difference `(f(p + εeᵢ) − f(p − εeᵢ)) / 2ε` for every scalar of `p`.
pub fn finite_diff_grad<P, F>(f: F, p: &P, eps: f64) -> Result<Vec<P::Elem>>
where
    P: ParamTree,
    F: Fn(&P) -> Result<P::Elem>,
{
    finite_diff_grad_at(f, p, eps, 0..p.num_scalars())
}

/// Same as [`finite_diff_grad`] restricted to the listed flat indices.
pub fn finite_diff_grad_at<P, F>(
    f: F,
    p: &P,
    eps: f64,
    indices: impl IntoIterator<Item = usize>,
) -> Result<Vec<P::Elem>>
where
    P: ParamTree,
    F: Fn(&P) -> Result<P::Elem>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite difference step must be positive, got {eps}")));
    }
    let step = P::Elem::from_f64(eps);
    let mut work = p.clone();
    let mut out = Vec::new();
    for i in indices {
        let original = *work
            .scalar_mut(i)
            .ok_or_else(|| Error::invalid(format!("parameter index {i} out of range")))?;
        *work.scalar_mut(i).unwrap() = original + step;
        let plus = f(&work)?;
        *work.scalar_mut(i).unwrap() = original - step;
        let minus = f(&work)?;
        *work.scalar_mut(i).unwrap() = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at perturbed parameter {i}")));
        }
        out.push((plus - minus) / (step + step));
    }
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst disagreement found by [`compare`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_path: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_path: String::new(),
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            checked: 0,
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            let checked = self.checked;
            *self = other;
            self.checked = checked;
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares an analytic gradient tree against numeric values at the given flat indices.
pub fn compare<P: ParamTree>(analytic: &P, indices: &[usize], numeric: &[P::Elem]) -> GradCheckReport {
    let mut locations = Vec::with_capacity(analytic.num_scalars());
    let mut values = Vec::with_capacity(analytic.num_scalars());
    for (path, t) in analytic.tensors() {
        for (k, &v) in t.data().iter().enumerate() {
            locations.push((path.clone(), k));
            values.push(v.to_f64());
        }
    }
    let mut report = GradCheckReport::empty();
    for (&i, &n) in indices.iter().zip(numeric) {
        let err = relative_error(values[i], n.to_f64());
        if report.checked == 0 || err > report.max_rel_error {
            let (path, k) = &locations[i];
            report.max_rel_error = err;
            report.worst_path = format!("{path}[{k}]");
            report.worst_analytic = values[i];
            report.worst_numeric = n.to_f64();
        }
        report.checked += 1;
    }
    report
}
