use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::graph::{slot, Graph, Node, Op, Var};
use crate::ops::conv::out_dim;
use crate::tensor::Tensor;

fn dims4(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h, w)),
        _ => shape_err(format!("{op} expects [N,C,H,W], got {shape:?}")),
    }
}

/// Max over per-output windows given as row/column ranges. Ties keep the
/// first element in row-major window order.
fn window_max<E: Element>(
    x: &Tensor<E>,
    rows: &[(usize, usize)],
    cols: &[(usize, usize)],
) -> (Vec<E>, Vec<usize>) {
    let (n, c, h, w) = dims4(x.shape(), "pool").expect("checked by caller");
    let mut out = Vec::with_capacity(n * c * rows.len() * cols.len());
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        let data = &x.data()[base..base + h * w];
        for &(r0, r1) in rows {
            for &(c0, c1) in cols {
                let mut best = r0 * w + c0;
                for r in r0..r1 {
                    for col in c0..c1 {
                        if data[r * w + col] > data[best] {
                            best = r * w + col;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(base + best);
            }
        }
    }
    (out, argmax)
}

/// Windows of a strided pool with implicit `-inf` padding, clipped to the
/// input extent.
fn strided_windows(len: usize, kernel: usize, stride: usize, pad: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|o| {
            let start = (o * stride) as isize - pad as isize;
            let end = start + kernel as isize;
            (start.max(0) as usize, end.min(len as isize) as usize)
        })
        .collect()
}

fn adaptive_windows(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out).map(|o| ((o * len) / out, ((o + 1) * len).div_ceil(out))).collect()
}

impl<E: Element> Graph<E> {
    /// Max pooling with a square window.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let xt = self.shared_value(x)?;
        let (n, c, h, w) = dims4(xt.shape(), "maxpool2d")?;
        if padding * 2 > kernel {
            return shape_err(format!("maxpool2d padding {padding} exceeds half of kernel {kernel}"));
        }
        let (Some(oh), Some(ow)) = (out_dim(h, kernel, stride, padding), out_dim(w, kernel, stride, padding))
        else {
            return shape_err(format!("maxpool2d window {kernel} larger than input {h}x{w}"));
        };
        let rows = strided_windows(h, kernel, stride, padding, oh);
        let cols = strided_windows(w, kernel, stride, padding, ow);
        let (out, argmax) = window_max(&xt, &rows, &cols);
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        self.push("maxpool2d", value, &[x.index], || Op::MaxPool2d { x: x.index, argmax })
    }

    /// Max pooling to a fixed `out_h × out_w` grid; window `i` spans
    /// `[floor(i·H/out), ceil((i+1)·H/out))`.
    pub fn adaptive_maxpool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xt = self.shared_value(x)?;
        let (n, c, h, w) = dims4(xt.shape(), "adaptive_maxpool2d")?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return shape_err(format!("adaptive_maxpool2d {h}x{w} -> {out_h}x{out_w}"));
        }
        let rows = adaptive_windows(h, out_h);
        let cols = adaptive_windows(w, out_w);
        let (out, argmax) = window_max(&xt, &rows, &cols);
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        self.push("adaptive_maxpool2d", value, &[x.index], || Op::MaxPool2d { x: x.index, argmax })
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xt = self.shared_value(x)?;
        let (n, c, h, w) = dims4(xt.shape(), "global_avg_pool")?;
        let area = h * w;
        let inv = E::of(1.0 / area as f64);
        let out = xt.data().chunks(area).map(|p| p.iter().copied().sum::<E>() * inv).collect();
        let value = Tensor::new(&[n, c], out)?;
        self.push("global_avg_pool", value, &[x.index], || Op::GlobalAvgPool { x: x.index })
    }
}

pub(crate) fn maxpool_backward<E: Element>(
    nodes: &[Node<E>],
    g: &[E],
    grads: &mut [Option<Vec<E>>],
    x: usize,
    argmax: &[usize],
) {
    if let Some(dx) = slot(grads, nodes, x) {
        for (&src, &gv) in argmax.iter().zip(g) {
            dx[src] = dx[src] + gv;
        }
    }
}

pub(crate) fn global_avg_backward<E: Element>(
    nodes: &[Node<E>],
    g: &[E],
    grads: &mut [Option<Vec<E>>],
    x: usize,
) {
    let shape = nodes[x].value.shape().to_vec();
    let area = shape[2] * shape[3];
    let inv = E::of(1.0 / area as f64);
    if let Some(dx) = slot(grads, nodes, x) {
        for (plane, &gv) in dx.chunks_mut(area).zip(g) {
            plane.iter_mut().for_each(|v| *v = *v + gv * inv);
        }
    }
}
