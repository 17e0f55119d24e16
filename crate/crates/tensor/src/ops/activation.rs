use rand::Rng;

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::graph::{slot, Graph, Mode, Node, Op, Var};
use crate::tensor::Tensor;

/// `(outer, k, inner)` extents of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(format!("axis {axis} out of range for {shape:?}"));
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

fn softmax_lanes<E: Element>(x: &[E], (outer, k, inner): (usize, usize, usize), log: bool) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * k + j) * inner + i;
            let mut max = E::neg_infinity();
            for j in 0..k {
                max = max.max(x[idx(j)]);
            }
            let mut total = E::zero();
            for j in 0..k {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                total = total + e;
            }
            if log {
                let lse = total.ln();
                for j in 0..k {
                    out[idx(j)] = x[idx(j)] - max - lse;
                }
            } else {
                for j in 0..k {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
    }
    out
}

/// Row-wise stable softmax of a `[N, K]` slice (used by the loss kernels).
pub(crate) fn softmax_rows<E: Element>(x: &[E], k: usize) -> Vec<E> {
    softmax_lanes(x, (x.len() / k.max(1), k, 1), false)
}

impl<E: Element> Graph<E> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = self.shared_value(x)?;
        let value = xt.map(|v| if v > E::zero() { v } else { E::zero() });
        self.push("relu", value, &[x.index], || Op::Relu { x: x.index })
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`; eval mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) || p.is_nan() {
            return Err(TensorError::InvalidP(p));
        }
        if mode == Mode::Eval || p == 0.0 {
            // identity: hand back the input node itself
            self.node(x)?;
            return Ok(x);
        }
        let xt = self.shared_value(x)?;
        let scale = E::of(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..xt.numel())
            .map(|_| if rng.random::<f64>() < p { E::zero() } else { scale })
            .collect();
        let out = xt.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xt.shape(), out)?;
        self.push("dropout", value, &[x.index], || Op::Dropout { x: x.index, mask })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.shared_value(x)?;
        let (outer, k, inner) = axis_split(xt.shape(), axis)?;
        let value = Tensor::new(xt.shape(), softmax_lanes(xt.data(), (outer, k, inner), false))?;
        self.push("softmax", value, &[x.index], || Op::Softmax { x: x.index, outer, k, inner })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.shared_value(x)?;
        let (outer, k, inner) = axis_split(xt.shape(), axis)?;
        let value = Tensor::new(xt.shape(), softmax_lanes(xt.data(), (outer, k, inner), true))?;
        self.push("log_softmax", value, &[x.index], || Op::LogSoftmax { x: x.index, outer, k, inner })
    }
}

pub(crate) fn relu_backward<E: Element>(
    nodes: &[Node<E>],
    out: &Tensor<E>,
    g: &[E],
    grads: &mut [Option<Vec<E>>],
    x: usize,
) {
    if let Some(dx) = slot(grads, nodes, x) {
        for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
            if y > E::zero() {
                *d = *d + gv;
            }
        }
    }
}

pub(crate) fn dropout_backward<E: Element>(
    nodes: &[Node<E>],
    g: &[E],
    grads: &mut [Option<Vec<E>>],
    x: usize,
    mask: &[E],
) {
    if let Some(dx) = slot(grads, nodes, x) {
        for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
            *d = *d + gv * m;
        }
    }
}

pub(crate) fn softmax_backward<E: Element>(
    nodes: &[Node<E>],
    out: &Tensor<E>,
    g: &[E],
    grads: &mut [Option<Vec<E>>],
    x: usize,
    (outer, k, inner): (usize, usize, usize),
) {
    let y = out.data();
    if let Some(dx) = slot(grads, nodes, x) {
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * k + j) * inner + i;
                let dot: E = (0..k).map(|j| g[idx(j)] * y[idx(j)]).sum();
                for j in 0..k {
                    dx[idx(j)] = dx[idx(j)] + y[idx(j)] * (g[idx(j)] - dot);
                }
            }
        }
    }
}

pub(crate) fn log_softmax_backward<E: Element>(
    nodes: &[Node<E>],
    out: &Tensor<E>,
    g: &[E],
    grads: &mut [Option<Vec<E>>],
    x: usize,
    (outer, k, inner): (usize, usize, usize),
) {
    let y = out.data();
    if let Some(dx) = slot(grads, nodes, x) {
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * k + j) * inner + i;
                let total: E = (0..k).map(|j| g[idx(j)]).sum();
                for j in 0..k {
                    dx[idx(j)] = dx[idx(j)] + g[idx(j)] - y[idx(j)].exp() * total;
                }
            }
        }
    }
}
