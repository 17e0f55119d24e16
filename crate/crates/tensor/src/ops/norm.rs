use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::graph::{slot, Graph, Mode, Node, Op, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of a batch-norm layer, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<E: Element = f32> {
    pub mean: Tensor<E>,
    /// Unbiased running variance.
    pub var: Tensor<E>,
    /// `Some(k)`: the stats are a plain average over the `k` batches seen
    /// so far rather than an exponential moving average.
    pub averaged_batches: Option<u64>,
}

impl<E: Element> BatchNormStats<E> {
    pub fn new(channels: usize) -> Self {
        Self::from_tensors(Tensor::zeros(&[channels]), Tensor::ones(&[channels]))
    }

    /// Exponential-moving-average stats starting from the given values.
    pub fn from_tensors(mean: Tensor<E>, var: Tensor<E>) -> Self {
        BatchNormStats { mean, var, averaged_batches: None }
    }

    /// Empty stats that average over subsequent train-mode batches.
    pub fn averaging(channels: usize) -> Self {
        BatchNormStats { mean: Tensor::zeros(&[channels]), var: Tensor::zeros(&[channels]), averaged_batches: Some(0) }
    }
}

impl<E: Element> Graph<E> {
    /// Per-channel normalization of `[N,C,H,W]`.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `stats` (momentum 0.1); eval mode normalizes with `stats`.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<E>,
        mode: Mode,
    ) -> Result<Var> {
        let xt = self.shared_value(x)?;
        let &[n, c, h, w] = xt.shape() else {
            return shape_err(format!("batch_norm2d expects [N,C,H,W], got {:?}", xt.shape()));
        };
        let gt = self.shared_value(gamma)?;
        let bt = self.shared_value(beta)?;
        for (name, t) in [("gamma", &*gt), ("beta", &*bt), ("running mean", &stats.mean), ("running var", &stats.var)] {
            if t.shape() != [c] {
                return shape_err(format!("batch_norm2d {name} {:?} for {c} channels", t.shape()));
            }
        }
        let area = h * w;
        let count = n * area;
        let eps = E::of(BN_EPS);
        let (mean, inv_std): (Vec<E>, Vec<E>) = match mode {
            Mode::Train => {
                if count < 2 {
                    return shape_err("batch_norm2d needs more than one value per channel in train mode");
                }
                let mut means = Vec::with_capacity(c);
                let mut inv = Vec::with_capacity(c);
                let m = E::of(match stats.averaged_batches {
                    Some(k) => 1.0 / (k + 1) as f64,
                    None => BN_MOMENTUM,
                });
                if let Some(k) = stats.averaged_batches.as_mut() {
                    *k += 1;
                }
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for i in 0..n {
                        let off = (i * c + ch) * area;
                        sum += xt.data()[off..off + area].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = sum / count as f64;
                    let mut sq = 0.0f64;
                    for i in 0..n {
                        let off = (i * c + ch) * area;
                        sq += xt.data()[off..off + area].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                    }
                    let var = sq / count as f64;
                    let unbiased = sq / (count - 1) as f64;
                    let rm = &mut stats.mean.data_mut()[ch];
                    *rm = (E::one() - m) * *rm + m * E::of(mu);
                    let rv = &mut stats.var.data_mut()[ch];
                    *rv = (E::one() - m) * *rv + m * E::of(unbiased);
                    means.push(E::of(mu));
                    inv.push(E::of(1.0 / (var + BN_EPS).sqrt()));
                }
                (means, inv)
            }
            Mode::Eval => (
                stats.mean.data().to_vec(),
                stats.var.data().iter().map(|&v| E::one() / (v + eps).sqrt()).collect(),
            ),
        };

        let mut xhat = vec![E::zero(); xt.numel()];
        let mut out = vec![E::zero(); xt.numel()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * area;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], gt.data()[ch], bt.data()[ch]);
                for j in off..off + area {
                    let xh = (xt.data()[j] - mu) * is;
                    xhat[j] = xh;
                    out[j] = xh * ga + be;
                }
            }
        }
        let value = Tensor::new(xt.shape(), out)?;
        self.push("batch_norm2d", value, &[x.index, gamma.index, beta.index], || Op::BatchNorm {
            x: x.index,
            gamma: gamma.index,
            beta: beta.index,
            xhat,
            inv_std,
            batch_stats: mode == Mode::Train,
        })
    }
}

pub(crate) fn batch_norm_backward<E: Element>(
    nodes: &[Node<E>],
    g: &[E],
    grads: &mut [Option<Vec<E>>],
    (x, gamma, beta): (usize, usize, usize),
    xhat: &[E],
    inv_std: &[E],
    batch_stats: bool,
) {
    let shape = nodes[x].value.shape().to_vec();
    let (n, c, area) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = E::of((n * area) as f64);
    let gamma_v = nodes[gamma].value.data().to_vec();

    // per-channel sums of dy and dy·xhat
    let mut sum_g = vec![E::zero(); c];
    let mut sum_gx = vec![E::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * area;
            for j in off..off + area {
                sum_g[ch] = sum_g[ch] + g[j];
                sum_gx[ch] = sum_gx[ch] + g[j] * xhat[j];
            }
        }
    }
    if let Some(dg) = slot(grads, nodes, gamma) {
        dg.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d = *d + s);
    }
    if let Some(db) = slot(grads, nodes, beta) {
        db.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d = *d + s);
    }
    if let Some(dx) = slot(grads, nodes, x) {
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * area;
                let k = gamma_v[ch] * inv_std[ch];
                for j in off..off + area {
                    let d = if batch_stats {
                        k * (g[j] - sum_g[ch] / count - xhat[j] * sum_gx[ch] / count)
                    } else {
                        k * g[j]
                    };
                    dx[j] = dx[j] + d;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let mut g = Graph::<f32>::inference();
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.3 - 2.0).collect();
        let x = g.constant(Tensor::new(&[2, 3, 2, 2], data.clone()).unwrap());
        let gamma = g.constant(Tensor::<f32>::ones(&[3]));
        let beta = g.constant(Tensor::<f32>::zeros(&[3]));
        let mut stats = BatchNormStats::new(3);
        let y = g.batch_norm2d(x, gamma, beta, &mut stats, Mode::Eval).unwrap();
        for (a, b) in g.value(y).unwrap().data().iter().zip(&data) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        assert_eq!(stats, BatchNormStats::new(3));
    }

    #[test]
    fn averaging_stats_are_plain_means() {
        let mut g = Graph::<f64>::inference();
        let gamma = g.constant(Tensor::<f64>::ones(&[1]));
        let beta = g.constant(Tensor::<f64>::zeros(&[1]));
        let mut stats = BatchNormStats::averaging(1);
        // batch means 1 and 4, unbiased variances 2 and 8
        for batch in [[0.0, 2.0, 0.0, 2.0], [2.0, 6.0, 2.0, 6.0]] {
            let x = g.constant(Tensor::new(&[1, 1, 2, 2], batch.to_vec()).unwrap());
            g.batch_norm2d(x, gamma, beta, &mut stats, Mode::Train).unwrap();
        }
        assert_eq!(stats.averaged_batches, Some(2));
        assert!((stats.mean.data()[0] - 2.5).abs() < 1e-12);
        let (v1, v2) = (4.0 / 3.0, 16.0 / 3.0);
        assert!((stats.var.data()[0] - (v1 + v2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn train_mode_centers_channels_and_updates_stats() {
        let mut g = Graph::<f32>::inference();
        let data: Vec<f32> = (0..32).map(|i| (i as f32).sin() * 3.0 + 5.0).collect();
        let x = g.constant(Tensor::new(&[2, 2, 2, 4], data).unwrap());
        let gamma = g.constant(Tensor::<f32>::ones(&[2]));
        let beta = g.constant(Tensor::<f32>::zeros(&[2]));
        let mut stats = BatchNormStats::new(2);
        let y = g.batch_norm2d(x, gamma, beta, &mut stats, Mode::Train).unwrap();
        let out = g.value(y).unwrap();
        for ch in 0..2 {
            let mut s = 0.0;
            for i in 0..2 {
                s += out.data()[(i * 2 + ch) * 8..(i * 2 + ch + 1) * 8].iter().sum::<f32>();
            }
            assert!((s / 16.0).abs() < 1e-5);
        }
        assert!(stats.mean.data().iter().all(|&m| m > 0.3));
    }

    #[test]
    fn wrong_channel_count() {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(Tensor::<f32>::zeros(&[1, 3, 2, 2]));
        let gamma = g.constant(Tensor::<f32>::ones(&[2]));
        let beta = g.constant(Tensor::<f32>::zeros(&[2]));
        let mut stats = BatchNormStats::new(2);
        assert!(g.batch_norm2d(x, gamma, beta, &mut stats, Mode::Eval).is_err());
    }
}
