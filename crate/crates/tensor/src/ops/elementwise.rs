use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::graph::{slot, Graph, Node, Op, Var};
use crate::tensor::Tensor;

impl<E: Element> Graph<E> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.shared_value(a)?, self.shared_value(b)?);
        if at.shape() != bt.shape() {
            return shape_err(format!("add {:?} + {:?}", at.shape(), bt.shape()));
        }
        let out = at.data().iter().zip(bt.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(at.shape(), out)?;
        self.push("add", value, &[a.index, b.index], || Op::Add { a: a.index, b: b.index })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.shared_value(a)?, self.shared_value(b)?);
        if at.shape() != bt.shape() {
            return shape_err(format!("mul {:?} * {:?}", at.shape(), bt.shape()));
        }
        let out = at.data().iter().zip(bt.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(at.shape(), out)?;
        self.push("mul", value, &[a.index, b.index], || Op::Mul { a: a.index, b: b.index })
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xt = self.shared_value(x)?;
        let factor = E::of(factor);
        let value = xt.map(|v| v * factor);
        self.push("scale", value, &[x.index], || Op::Scale { x: x.index, factor })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xt = self.shared_value(x)?;
        let value = Tensor::scalar(xt.sum());
        self.push("sum", value, &[x.index], || Op::Sum { x: x.index })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xt = self.shared_value(x)?;
        if xt.numel() == 0 {
            return shape_err("mean of an empty tensor");
        }
        let value = Tensor::scalar(xt.sum() / E::of(xt.numel() as f64));
        self.push("mean", value, &[x.index], || Op::Mean { x: x.index })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xt = self.shared_value(x)?;
        let value = Tensor::clone(&xt).reshape(shape)?;
        self.push("reshape", value, &[x.index], || Op::Reshape { x: x.index })
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x)?.shape().to_vec();
        let Some((&n, rest)) = shape.split_first() else {
            return shape_err("flatten of a scalar");
        };
        self.reshape(x, &[n, rest.iter().product()])
    }
}

pub(crate) fn add_backward<E: Element>(nodes: &[Node<E>], g: &[E], grads: &mut [Option<Vec<E>>], a: usize, b: usize) {
    for i in [a, b] {
        if let Some(d) = slot(grads, nodes, i) {
            d.iter_mut().zip(g).for_each(|(v, &gv)| *v = *v + gv);
        }
    }
}

pub(crate) fn mul_backward<E: Element>(nodes: &[Node<E>], g: &[E], grads: &mut [Option<Vec<E>>], a: usize, b: usize) {
    let av = nodes[a].value.data().to_vec();
    let bv = nodes[b].value.data().to_vec();
    if let Some(d) = slot(grads, nodes, a) {
        for ((v, &gv), &o) in d.iter_mut().zip(g).zip(&bv) {
            *v = *v + gv * o;
        }
    }
    if let Some(d) = slot(grads, nodes, b) {
        for ((v, &gv), &o) in d.iter_mut().zip(g).zip(&av) {
            *v = *v + gv * o;
        }
    }
}

pub(crate) fn scale_backward<E: Element>(nodes: &[Node<E>], g: &[E], grads: &mut [Option<Vec<E>>], x: usize, factor: E) {
    if let Some(d) = slot(grads, nodes, x) {
        d.iter_mut().zip(g).for_each(|(v, &gv)| *v = *v + gv * factor);
    }
}

pub(crate) fn sum_backward<E: Element>(nodes: &[Node<E>], g: &[E], grads: &mut [Option<Vec<E>>], x: usize, mean: bool) {
    let n = nodes[x].value.numel();
    let gv = if mean { g[0] / E::of(n as f64) } else { g[0] };
    if let Some(d) = slot(grads, nodes, x) {
        d.iter_mut().for_each(|v| *v = *v + gv);
    }
}

pub(crate) fn reshape_backward<E: Element>(nodes: &[Node<E>], g: &[E], grads: &mut [Option<Vec<E>>], x: usize) {
    if let Some(d) = slot(grads, nodes, x) {
        d.iter_mut().zip(g).for_each(|(v, &gv)| *v = *v + gv);
    }
}
