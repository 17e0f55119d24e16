use crate::element::{gemm, Element, Mat};
use crate::error::{shape_err, Result};
use crate::graph::{slot, Graph, Node, Op, Var};
use crate::tensor::Tensor;

impl<E: Element> Graph<E> {
    /// Affine map `x·W + b` with `x: [N,D]`, `W: [D,O]`, `b: [O]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xt = self.shared_value(x)?;
        let wt = self.shared_value(weight)?;
        let (&[n, d], &[d2, o]) = (xt.shape(), wt.shape()) else {
            return shape_err(format!("dense expects [N,D]·[D,O], got {:?}·{:?}", xt.shape(), wt.shape()));
        };
        if d != d2 {
            return shape_err(format!("dense inner dims {d} vs {d2}"));
        }
        let mut out = vec![E::zero(); n * o];
        gemm(Mat::new(xt.data(), n, d), Mat::new(wt.data(), d, o), E::zero(), &mut out);
        if let Some(b) = bias {
            let bt = self.value(b)?;
            if bt.shape() != [o] {
                return shape_err(format!("dense bias {:?} for {o} outputs", bt.shape()));
            }
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bt.data()).for_each(|(v, &bv)| *v = *v + bv);
            }
        }
        let value = Tensor::new(&[n, o], out)?;
        let mut inputs = vec![x.index, weight.index];
        inputs.extend(bias.map(|b| b.index));
        self.push("dense", value, &inputs, || Op::Dense {
            x: x.index,
            w: weight.index,
            b: bias.map(|b| b.index),
        })
    }
}

pub(crate) fn dense_backward<E: Element>(
    nodes: &[Node<E>],
    g: &[E],
    grads: &mut [Option<Vec<E>>],
    x: usize,
    w: usize,
    b: Option<usize>,
) {
    let xt = &nodes[x].value;
    let wt = &nodes[w].value;
    let (n, d) = (xt.shape()[0], xt.shape()[1]);
    let o = wt.shape()[1];
    if let Some(dx) = slot(grads, nodes, x) {
        gemm(Mat::new(g, n, o), Mat::t(wt.data(), o, d), E::one(), dx);
    }
    if let Some(dw) = slot(grads, nodes, w) {
        gemm(Mat::t(xt.data(), d, n), Mat::new(g, n, o), E::one(), dw);
    }
    if let Some(bi) = b {
        if let Some(db) = slot(grads, nodes, bi) {
            for row in g.chunks(o) {
                db.iter_mut().zip(row).for_each(|(v, &gv)| *v = *v + gv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight() {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let w = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let b = g.constant(Tensor::<f32>::zeros(&[3]));
        let y = g.dense(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).unwrap(), g.value(x).unwrap());
    }

    #[test]
    fn hand_arithmetic() {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::new(&[1], vec![0.5]).unwrap());
        let y = g.dense(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[3.5]);
    }

    #[test]
    fn mismatched_dims() {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(Tensor::<f32>::zeros(&[1, 3]));
        let w = g.constant(Tensor::<f32>::zeros(&[2, 1]));
        assert!(g.dense(x, w, None).is_err());
    }
}
