mod activation;
mod conv;
mod dense;
mod elementwise;
mod loss;
mod norm;
mod pool;

pub use norm::{BatchNormStats, BN_EPS, BN_MOMENTUM};

use crate::element::Element;
use crate::error::Result;
use crate::graph::{Node, Op};
use crate::tensor::Tensor;

pub(crate) fn backward<E: Element>(
    op: &Op<E>,
    out: &Tensor<E>,
    nodes: &[Node<E>],
    g: &[E],
    grads: &mut [Option<Vec<E>>],
) -> Result<()> {
    match op {
        Op::Source => {}
        Op::Conv2d { x, w, b, stride, pad } => {
            conv::conv2d_backward(nodes, g, grads, *x, *w, *b, *stride, *pad)
        }
        Op::MaxPool2d { x, argmax } => pool::maxpool_backward(nodes, g, grads, *x, argmax),
        Op::GlobalAvgPool { x } => pool::global_avg_backward(nodes, g, grads, *x),
        Op::Dense { x, w, b } => dense::dense_backward(nodes, g, grads, *x, *w, *b),
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => norm::batch_norm_backward(
            nodes,
            g,
            grads,
            (*x, *gamma, *beta),
            xhat,
            inv_std,
            *batch_stats,
        ),
        Op::Relu { x } => activation::relu_backward(nodes, out, g, grads, *x),
        Op::Dropout { x, mask } => activation::dropout_backward(nodes, g, grads, *x, mask),
        Op::Softmax { x, outer, k, inner } => {
            activation::softmax_backward(nodes, out, g, grads, *x, (*outer, *k, *inner))
        }
        Op::LogSoftmax { x, outer, k, inner } => {
            activation::log_softmax_backward(nodes, out, g, grads, *x, (*outer, *k, *inner))
        }
        Op::Add { a, b } => elementwise::add_backward(nodes, g, grads, *a, *b),
        Op::Mul { a, b } => elementwise::mul_backward(nodes, g, grads, *a, *b),
        Op::Scale { x, factor } => elementwise::scale_backward(nodes, g, grads, *x, *factor),
        Op::Sum { x } => elementwise::sum_backward(nodes, g, grads, *x, false),
        Op::Mean { x } => elementwise::sum_backward(nodes, g, grads, *x, true),
        Op::Reshape { x } => elementwise::reshape_backward(nodes, g, grads, *x),
        Op::CrossEntropy { x, probs, labels } => {
            loss::cross_entropy_backward(nodes, g, grads, *x, probs, labels)
        }
        Op::KlDiv { p, q } => loss::kl_backward(nodes, g, grads, *p, *q),
    }
    Ok(())
}
