//! Central finite-difference checks against [`Graph::backward`].

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Check every coordinate of `x`.
pub fn gradient_check<E, F>(f: F, x: &Tensor<E>, eps: f64) -> Result<GradCheckReport>
where
    E: Element,
    F: FnMut(&mut Graph<E>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    gradient_check_at(f, x, eps, &all)
}

/// Check only the listed coordinates of `x`; for large inputs where a full
/// sweep would be too slow.
///
/// `f` must be deterministic: it is evaluated once on a recording tape and
/// twice per coordinate on inference tapes.
pub fn gradient_check_at<E, F>(mut f: F, x: &Tensor<E>, eps: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    E: Element,
    F: FnMut(&mut Graph<E>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get(xv).ok_or(TensorError::DetachedNode)?.clone();

    let mut eval = |t: Tensor<E>| -> Result<f64> {
        let mut g = Graph::inference();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        let value = g.value(out)?;
        value.item().map(|v| v.as_f64()).ok_or_else(|| TensorError::NotScalar(value.shape().to_vec()))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst_index: 0, checked: 0 };
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] = E::of(x.data()[i].as_f64() + eps);
        let mut minus = x.clone();
        minus.data_mut()[i] = E::of(x.data()[i].as_f64() - eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i].as_f64();
        let rel = relative_error(a, numeric);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        report.checked += 1;
    }
    Ok(report)
}
