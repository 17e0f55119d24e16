use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::graph::{slot, Graph, Node, Op, Var};
use crate::ops::activation::softmax_rows;
use crate::tensor::Tensor;

/// Floor applied to `q` inside the KL logarithm.
pub const KL_Q_FLOOR: f64 = 1e-12;
/// Row-sum tolerance for probability inputs.
pub const DISTRIBUTION_TOL: f64 = 1e-5;

fn rows_of(shape: &[usize], op: &str) -> Result<(usize, usize)> {
    match shape {
        &[n, k] if k > 0 => Ok((n, k)),
        _ => shape_err(format!("{op} expects [N,K], got {shape:?}")),
    }
}

fn check_distribution<E: Element>(t: &Tensor<E>, k: usize) -> Result<()> {
    for (row, probs) in t.data().chunks(k).enumerate() {
        let sum: f64 = probs.iter().map(|p| p.as_f64()).sum();
        if probs.iter().any(|p| p.as_f64() < 0.0) || (sum - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(TensorError::NotADistribution { row, sum });
        }
    }
    Ok(())
}

impl<E: Element> Graph<E> {
    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xt = self.shared_value(logits)?;
        let (n, k) = rows_of(xt.shape(), "cross_entropy")?;
        if labels.len() != n {
            return shape_err(format!("cross_entropy: {n} rows but {} labels", labels.len()));
        }
        if n == 0 {
            return shape_err("cross_entropy of an empty batch");
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let mut total = 0.0f64;
        for (row, &label) in xt.data().chunks(k).zip(labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[label].as_f64();
        }
        let value = Tensor::scalar(E::of(total / n as f64));
        self.push("cross_entropy", value, &[logits.index], || Op::CrossEntropy {
            x: logits.index,
            probs: softmax_rows(xt.data(), k),
            labels: labels.to_vec(),
        })
    }

    /// Mean over rows of `Σ p·ln(p/q)`.
    ///
    /// Rows of both inputs must be probability vectors. Terms with `p = 0`
    /// contribute nothing; `q` is floored at 1e-12 inside the logarithm.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pt, qt) = (self.shared_value(p)?, self.shared_value(q)?);
        let (n, k) = rows_of(pt.shape(), "kl_divergence")?;
        if qt.shape() != pt.shape() {
            return shape_err(format!("kl_divergence {:?} vs {:?}", pt.shape(), qt.shape()));
        }
        if n == 0 {
            return shape_err("kl_divergence of an empty batch");
        }
        check_distribution(&pt, k)?;
        check_distribution(&qt, k)?;
        let mut total = 0.0f64;
        for (pr, qr) in pt.data().chunks(k).zip(qt.data().chunks(k)) {
            let mut row = 0.0f64;
            for (&pv, &qv) in pr.iter().zip(qr) {
                let (pv, qv) = (pv.as_f64(), qv.as_f64().max(KL_Q_FLOOR));
                if pv > 0.0 {
                    row += pv * (pv / qv).ln();
                }
            }
            // a row is non-negative in exact arithmetic; don't let rounding
            // say otherwise
            total += row.max(0.0);
        }
        let value = Tensor::scalar(E::of(total / n as f64));
        self.push("kl_divergence", value, &[p.index, q.index], || Op::KlDiv { p: p.index, q: q.index })
    }
}

pub(crate) fn cross_entropy_backward<E: Element>(
    nodes: &[Node<E>],
    g: &[E],
    grads: &mut [Option<Vec<E>>],
    x: usize,
    probs: &[E],
    labels: &[usize],
) {
    let n = labels.len();
    let k = probs.len() / n;
    let scale = g[0] / E::of(n as f64);
    if let Some(dx) = slot(grads, nodes, x) {
        for (r, &label) in labels.iter().enumerate() {
            for j in 0..k {
                let onehot = if j == label { E::one() } else { E::zero() };
                dx[r * k + j] = dx[r * k + j] + (probs[r * k + j] - onehot) * scale;
            }
        }
    }
}

pub(crate) fn kl_backward<E: Element>(nodes: &[Node<E>], g: &[E], grads: &mut [Option<Vec<E>>], p: usize, q: usize) {
    let pv = nodes[p].value.data().to_vec();
    let qv = nodes[q].value.data().to_vec();
    let n = nodes[p].value.shape()[0];
    let scale = g[0].as_f64() / n as f64;
    let floor = KL_Q_FLOOR;
    if let Some(dp) = slot(grads, nodes, p) {
        for ((d, &a), &b) in dp.iter_mut().zip(&pv).zip(&qv) {
            let (a, b) = (a.as_f64().max(floor), b.as_f64().max(floor));
            *d = *d + E::of(((a / b).ln() + 1.0) * scale);
        }
    }
    if let Some(dq) = slot(grads, nodes, q) {
        for ((d, &a), &b) in dq.iter_mut().zip(&pv).zip(&qv) {
            let b = b.as_f64();
            if b > floor {
                *d = *d + E::of(-a.as_f64() / b * scale);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: Vec<f64>, labels: &[usize]) -> f64 {
        let mut g = Graph::<f64>::inference();
        let n = labels.len();
        let x = g.constant(Tensor::new(&[n, logits.len() / n], logits).unwrap());
        let l = g.cross_entropy(x, labels).unwrap();
        g.value(l).unwrap().item().unwrap()
    }

    fn kl(p: Vec<f64>, q: Vec<f64>) -> Result<f64> {
        let mut g = Graph::<f64>::inference();
        let k = p.len();
        let pv = g.constant(Tensor::new(&[1, k], p).unwrap());
        let qv = g.constant(Tensor::new(&[1, k], q).unwrap());
        let l = g.kl_divergence(pv, qv)?;
        Ok(g.value(l).unwrap().item().unwrap())
    }

    #[test]
    fn cross_entropy_closed_forms() {
        assert!(ce(vec![20.0, -20.0], &[0]) < 1e-15);
        for label in 0..2 {
            assert!((ce(vec![0.0, 0.0], &[label]) - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::<f64>::new();
        let logits = vec![0.3, -1.2, 2.0, 0.5];
        let x = g.param(Tensor::new(&[2, 2], logits.clone()).unwrap());
        let l = g.cross_entropy(x, &[1, 0]).unwrap();
        let grads = g.backward(l).unwrap();
        let d = grads.get(x).unwrap().data();
        let p0 = 1.0 / (1.0 + (-1.2f64 - 0.3).exp());
        let p1 = 1.0 / (1.0 + (0.5f64 - 2.0).exp());
        let expected = [(p0 - 0.0) / 2.0, (1.0 - p0 - 1.0) / 2.0, (p1 - 1.0) / 2.0, (1.0 - p1) / 2.0];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(Tensor::<f32>::zeros(&[1, 2]));
        assert_eq!(g.cross_entropy(x, &[2]), Err(TensorError::LabelOutOfRange { label: 2, classes: 2 }));
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl(vec![0.3, 0.7], vec![0.3, 0.7]).unwrap(), 0.0);
        assert!((kl(vec![1.0, 0.0], vec![0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(kl(vec![0.6, 0.6], vec![0.5, 0.5]), Err(TensorError::NotADistribution { .. })));
        assert!(matches!(kl(vec![1.5, -0.5], vec![0.5, 0.5]), Err(TensorError::NotADistribution { .. })));
    }

    #[test]
    fn kl_with_zero_q_is_finite() {
        let v = kl(vec![0.5, 0.5], vec![1.0, 0.0]).unwrap();
        assert!((v - (0.5 * (0.5f64).ln() + 0.5 * (0.5 / 1e-12f64).ln())).abs() < 1e-9);
    }
}
