use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// lr 1e-5, β1 0.9, β2 0.9999, ε 1e-8.
    fn default() -> Self {
        AdamConfig { lr: 1e-5, beta1: 0.9, beta2: 0.9999, eps: 1e-8 }
    }
}

/// First/second moment estimates for an ordered parameter list.
#[derive(Clone, Debug, Default)]
pub struct AdamState<E: Element = f32> {
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    t: u64,
}

impl<E: Element> AdamState<E> {
    pub fn new() -> Self {
        AdamState { m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update, in place.
///
/// Moments are created lazily on the first call; later calls must pass
/// parameters of the same shapes in the same order.
pub fn adam_step<E: Element>(
    params: &mut [&mut Tensor<E>],
    grads: &[&Tensor<E>],
    state: &mut AdamState<E>,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return shape_err(format!("adam: {} params but {} grads", params.len(), grads.len()));
    }
    if state.t == 0 {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() {
        return shape_err(format!("adam: state tracks {} params, got {}", state.m.len(), params.len()));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return shape_err(format!("adam: param {:?}, grad {:?}, state {:?}", p.shape(), g.shape(), m.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = E::of(mj);
            v[j] = E::of(vj);
            let update = config.lr * (mj / c1) / ((vj / c2).sqrt() + config.eps);
            *w = *w - E::of(update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(w: &mut Tensor<f32>, g: &Tensor<f32>, state: &mut AdamState<f32>, cfg: &AdamConfig) {
        adam_step(&mut [w], &[g], state, cfg).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = w.clone();
        let mut s = AdamState::new();
        step(&mut w, &Tensor::zeros(&[3]), &mut s, &AdamConfig::default());
        assert_eq!(w, before);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = Tensor::new(&[1], vec![0.0f32]).unwrap();
        let mut s = AdamState::new();
        step(&mut w, &Tensor::new(&[1], vec![0.3]).unwrap(), &mut s, &AdamConfig::default());
        assert!((w.data()[0] as f64 + 1e-5).abs() < 1e-9, "{}", w.data()[0]);
    }

    #[test]
    fn descends_quadratic() {
        let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        let mut w = Tensor::new(&[1], vec![1.0f32]).unwrap();
        let mut s = AdamState::new();
        let mut prev = 1.0f32;
        for _ in 0..50 {
            let g = w.map(|v| 2.0 * v);
            step(&mut w, &g, &mut s, &cfg);
            assert!(w.data()[0].abs() < prev);
            prev = w.data()[0].abs();
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let cfg = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        let mut w = Tensor::new(&[2], vec![0.25f32, -4.0]).unwrap();
        let before = w.clone();
        let mut s = AdamState::new();
        for _ in 0..3 {
            step(&mut w, &Tensor::new(&[2], vec![1.0, -7.0]).unwrap(), &mut s, &cfg);
        }
        assert_eq!(w, before);
    }

    #[test]
    fn shape_mismatch() {
        let mut w = Tensor::<f32>::zeros(&[2]);
        let mut s = AdamState::new();
        assert!(adam_step(&mut [&mut w], &[&Tensor::zeros(&[3])], &mut s, &AdamConfig::default()).is_err());
    }
}
