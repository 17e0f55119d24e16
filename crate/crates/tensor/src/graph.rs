//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable op appends a node to the [`Graph`]; the tape order is
//! the execution order, so [`Graph::backward`] can walk it once in reverse.
//! A tape is good for exactly one backward pass. Recording new ops after a
//! backward pass without calling [`Graph::reset`] poisons the tape, and the
//! next backward fails with [`TensorError::DetachedNode`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops;
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

fn fresh_tape_id() -> u64 {
    NEXT_TAPE.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) index: usize,
    pub(crate) tape: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Recording,
    Differentiated,
    Stale,
}

/// Train/eval switch for ops whose behavior depends on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) enum Op<E> {
    /// Leaf or a node recorded without gradient bookkeeping.
    Source,
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    GlobalAvgPool { x: usize },
    Dense { x: usize, w: usize, b: Option<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<E>, inv_std: Vec<E>, batch_stats: bool },
    Relu { x: usize },
    Dropout { x: usize, mask: Vec<E> },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: E },
    Sum { x: usize },
    Mean { x: usize },
    Reshape { x: usize },
    Softmax { x: usize, outer: usize, k: usize, inner: usize },
    LogSoftmax { x: usize, outer: usize, k: usize, inner: usize },
    CrossEntropy { x: usize, probs: Vec<E>, labels: Vec<usize> },
    KlDiv { p: usize, q: usize },
}

pub(crate) struct Node<E> {
    pub value: Arc<Tensor<E>>,
    pub op: Op<E>,
    pub requires_grad: bool,
}

pub struct Graph<E: Element = f32> {
    tape: u64,
    nodes: Vec<Node<E>>,
    phase: Phase,
    record: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    /// A tape that records gradient information.
    pub fn new() -> Self {
        Graph { tape: fresh_tape_id(), nodes: Vec::new(), phase: Phase::Recording, record: true }
    }

    /// A tape that only computes values; nothing it produces is differentiable.
    pub fn inference() -> Self {
        Graph { record: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Drop every node and start a fresh tape. Vars from before the reset are
    /// rejected afterwards.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.tape = fresh_tape_id();
        self.phase = Phase::Recording;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: impl Into<Arc<Tensor<E>>>) -> Var {
        self.leaf(value.into(), self.record)
    }

    /// Non-trainable leaf (inputs, frozen weights).
    pub fn constant(&mut self, value: impl Into<Arc<Tensor<E>>>) -> Var {
        self.leaf(value.into(), false)
    }

    fn leaf(&mut self, value: Arc<Tensor<E>>, requires_grad: bool) -> Var {
        self.touch();
        self.nodes.push(Node { value, op: Op::Source, requires_grad });
        Var { index: self.nodes.len() - 1, tape: self.tape }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<E>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shared_value(&self, v: Var) -> Result<Arc<Tensor<E>>> {
        Ok(Arc::clone(&self.node(v)?.value))
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    pub(crate) fn node(&self, v: Var) -> Result<&Node<E>> {
        if v.tape != self.tape {
            return Err(TensorError::DetachedNode);
        }
        self.nodes.get(v.index).ok_or(TensorError::DetachedNode)
    }

    fn touch(&mut self) {
        if self.phase == Phase::Differentiated {
            self.phase = Phase::Stale;
        }
    }

    /// Append an op result. `inputs` decides whether gradient bookkeeping is
    /// kept; the `op` closure is only invoked when it is.
    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<E>,
        inputs: &[usize],
        op: impl FnOnce() -> Op<E>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = self.record && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op() } else { Op::Source };
        self.touch();
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Ok(Var { index: self.nodes.len() - 1, tape: self.tape })
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients are returned for every trainable leaf on the tape; leaves the
    /// loss does not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<E>> {
        if self.phase != Phase::Recording {
            return Err(TensorError::DetachedNode);
        }
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        self.phase = Phase::Differentiated;

        let mut grads: Vec<Option<Vec<E>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(vec![E::one()]);
        let mut out = HashMap::new();
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Source = node.op {
                out.insert(i, Tensor::new(node.value.shape(), g)?);
                continue;
            }
            ops::backward(&node.op, &node.value, &self.nodes, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Source) {
                out.entry(i).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { tape: self.tape, grads: out })
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug)]
pub struct Gradients<E: Element = f32> {
    tape: u64,
    grads: HashMap<usize, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.index)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.remove(&v.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Gradient slot for node `i`, zero-initialised on first use.
pub(crate) fn slot<'a, E: Element>(
    grads: &'a mut [Option<Vec<E>>],
    nodes: &[Node<E>],
    i: usize,
) -> Option<&'a mut Vec<E>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let len = nodes[i].value.numel();
    Some(grads[i].get_or_insert_with(|| vec![E::zero(); len]))
}
