use crate::element::{gemm, Element, Mat};
use crate::error::{shape_err, Result};
use crate::graph::{slot, Graph, Node, Op, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold one `[C, H, W]` image into `[C·kh·kw, oh·ow]` patch columns.
fn im2col<E: Element>(x: &[E], g: &Geometry, cols: &mut [E]) {
    let area = g.out_area();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // contiguous run, clipped at both borders
                        let shift = kj as isize - g.pad as isize;
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize + shift;
                            *v = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { E::zero() };
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *v = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { E::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`], accumulating into `dx`.
fn col2im<E: Element>(cols: &[E], g: &Geometry, dx: &mut [E]) {
    let area = g.out_area();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Geometry> {
    if x.len() != 4 || k.len() != 4 {
        return shape_err(format!("conv2d expects 4-d input and kernel, got {x:?} and {k:?}"));
    }
    if x[1] != k[1] {
        return shape_err(format!("conv2d channels: input {x:?}, kernel {k:?}"));
    }
    let (Some(oh), Some(ow)) = (out_dim(x[2], k[2], stride, pad), out_dim(x[3], k[3], stride, pad))
    else {
        return shape_err(format!(
            "conv2d kernel {}x{} (stride {stride}, pad {pad}) does not fit input {}x{}",
            k[2], k[3], x[2], x[3]
        ));
    };
    Ok(Geometry { c: x[1], h: x[2], w: x[3], kh: k[2], kw: k[3], stride, pad, oh, ow })
}

impl<E: Element> Graph<E> {
    /// 2-d cross-correlation of `x: [N,C,H,W]` with `kernel: [F,C,kh,kw]`
    /// plus an optional per-filter bias `[F]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xt = self.shared_value(x)?;
        let kt = self.shared_value(kernel)?;
        let geo = geometry(xt.shape(), kt.shape(), stride, padding)?;
        let n = xt.shape()[0];
        let f = kt.shape()[0];
        let bt = match bias {
            Some(b) => {
                let bt = self.shared_value(b)?;
                if bt.shape() != [f] {
                    return shape_err(format!("conv2d bias {:?} for {f} filters", bt.shape()));
                }
                Some(bt)
            }
            None => None,
        };

        let area = geo.out_area();
        let in_size = geo.c * geo.h * geo.w;
        let mut out = vec![E::zero(); n * f * area];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![E::zero(); geo.patch() * area] };
        for i in 0..n {
            let xi = &xt.data()[i * in_size..(i + 1) * in_size];
            let rhs = if geo.is_pointwise() {
                xi
            } else {
                im2col(xi, &geo, &mut cols);
                &cols
            };
            let oi = &mut out[i * f * area..(i + 1) * f * area];
            gemm(Mat::new(kt.data(), f, geo.patch()), Mat::new(rhs, geo.patch(), area), E::zero(), oi);
            if let Some(bt) = &bt {
                for (fi, chunk) in oi.chunks_mut(area).enumerate() {
                    let b = bt.data()[fi];
                    chunk.iter_mut().for_each(|v| *v = *v + b);
                }
            }
        }
        let value = Tensor::new(&[n, f, geo.oh, geo.ow], out)?;
        let mut inputs = vec![x.index, kernel.index];
        inputs.extend(bias.map(|b| b.index));
        self.push("conv2d", value, &inputs, || Op::Conv2d {
            x: x.index,
            w: kernel.index,
            b: bias.map(|b| b.index),
            stride,
            pad: padding,
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<E: Element>(
    nodes: &[Node<E>],
    g: &[E],
    grads: &mut [Option<Vec<E>>],
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
) {
    let xt = &nodes[x].value;
    let kt = &nodes[w].value;
    let geo = geometry(xt.shape(), kt.shape(), stride, pad).expect("validated in forward");
    let n = xt.shape()[0];
    let f = kt.shape()[0];
    let area = geo.out_area();
    let in_size = geo.c * geo.h * geo.w;
    let patch = geo.patch();

    if let Some(bi) = b {
        if let Some(db) = slot(grads, nodes, bi) {
            for i in 0..n {
                for fi in 0..f {
                    let s: E = g[(i * f + fi) * area..(i * f + fi + 1) * area].iter().copied().sum();
                    db[fi] = db[fi] + s;
                }
            }
        }
    }

    let need_w = nodes[w].requires_grad;
    let need_x = nodes[x].requires_grad;
    let mut cols = vec![E::zero(); if geo.is_pointwise() { 0 } else { patch * area }];
    if need_w {
        let mut dw = grads[w].take().unwrap_or_else(|| vec![E::zero(); kt.numel()]);
        for i in 0..n {
            let xi = &xt.data()[i * in_size..(i + 1) * in_size];
            let rhs = if geo.is_pointwise() {
                xi
            } else {
                im2col(xi, &geo, &mut cols);
                &cols
            };
            let gi = &g[i * f * area..(i + 1) * f * area];
            gemm(Mat::new(gi, f, area), Mat::t(rhs, area, patch), E::one(), &mut dw);
        }
        grads[w] = Some(dw);
    }
    if need_x {
        let mut dx = grads[x].take().unwrap_or_else(|| vec![E::zero(); xt.numel()]);
        let mut dcols = vec![E::zero(); patch * area];
        for i in 0..n {
            let gi = &g[i * f * area..(i + 1) * f * area];
            let dxi = &mut dx[i * in_size..(i + 1) * in_size];
            if geo.is_pointwise() {
                gemm(Mat::t(kt.data(), patch, f), Mat::new(gi, f, area), E::one(), dxi);
            } else {
                gemm(Mat::t(kt.data(), patch, f), Mat::new(gi, f, area), E::zero(), &mut dcols);
                col2im(&dcols, &geo, dxi);
            }
        }
        grads[x] = Some(dx);
    }
}
