//! Finite-difference checks for every differentiable op, run in f64.

use edgekd_tensor::{
    gradient_check, BatchNormStats, Graph, Mode, Result, Tensor, TensorError, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weighted sum so the upstream gradient is not uniform.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y)?.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&shape, &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn assert_ok(name: &str, report: edgekd_tensor::GradCheckReport) {
    assert!(report.max_rel_error < TOL, "{name}: {report:?}");
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, 1.5]).unwrap());
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let report = gradient_check(|g, x| g.sum(x), &Tensor::<f32>::ones(&[6]), 1e-3).unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn square_gradient_is_two_x() {
    let data = vec![1.0, -2.0, 0.5];
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[3], data.clone()).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
    assert_eq!(grads.get(x).unwrap().data(), &expected[..]);
}

#[test]
fn reused_tensor_accumulates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3], &mut rng);
    let report = gradient_check(
        |g, x| {
            let a = g.scale(x, 3.0)?;
            let b = g.mul(x, a)?;
            let c = g.add(b, x)?;
            weighted_sum(g, c, 9)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert_ok("reuse", report);
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut g = Graph::<f32>::new();
    let used = g.param(Tensor::<f32>::ones(&[2]));
    let unused = g.param(Tensor::<f32>::ones(&[4]));
    let s = g.sum(used).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[4]));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::<f32>::ones(&[2]));
    assert_eq!(g.backward(x).unwrap_err(), TensorError::NotScalar(vec![2]));
}

#[test]
fn reused_tape_without_reset_is_rejected() {
    let mut g = Graph::<f32>::new();
    let w = g.param(Tensor::<f32>::ones(&[2]));
    let s = g.sum(w).unwrap();
    g.backward(s).unwrap();
    // second forward pass on the same tape
    let w2 = g.param(Tensor::<f32>::ones(&[2]));
    let s2 = g.sum(w2).unwrap();
    assert_eq!(g.backward(s2).unwrap_err(), TensorError::DetachedNode);

    g.reset();
    assert_eq!(g.sum(w).unwrap_err(), TensorError::DetachedNode);
    let w3 = g.param(Tensor::<f32>::ones(&[2]));
    let s3 = g.sum(w3).unwrap();
    assert!(g.backward(s3).is_ok());
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[2, 2, 5, 6], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    for (stride, pad) in [(1, 0), (2, 1), (1, 1)] {
        let (kc, bc) = (k.clone(), b.clone());
        let r = gradient_check(
            |g, x| {
                let k = g.constant(kc.clone());
                let b = g.constant(bc.clone());
                let y = g.conv2d(x, k, Some(b), stride, pad)?;
                weighted_sum(g, y, 1)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_ok("conv2d/x", r);
        let xc = x.clone();
        let r = gradient_check(
            |g, k| {
                let x = g.constant(xc.clone());
                let b = g.constant(bc.clone());
                let y = g.conv2d(x, k, Some(b), stride, pad)?;
                weighted_sum(g, y, 1)
            },
            &k,
            1e-5,
        )
        .unwrap();
        assert_ok("conv2d/k", r);
        let kc2 = k.clone();
        let r = gradient_check(
            |g, b| {
                let x = g.constant(xc.clone());
                let k = g.constant(kc2.clone());
                let y = g.conv2d(x, k, Some(b), stride, pad)?;
                weighted_sum(g, y, 1)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert_ok("conv2d/b", r);
    }
    // pointwise fast path
    let k1 = random(&[4, 2, 1, 1], &mut rng);
    let r = gradient_check(
        |g, x| {
            let k = g.constant(k1.clone());
            let y = g.conv2d(x, k, None, 1, 0)?;
            weighted_sum(g, y, 2)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert_ok("conv2d/pointwise", r);
}

#[test]
fn sum_of_conv_gradient_in_f32_path() {
    // same kernel code in f32, against f64 finite differences
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 2, 4, 4], &mut rng);
    let k = random(&[2, 2, 3, 3], &mut rng);
    let mut g = Graph::<f32>::new();
    let xv = g.param(x.cast::<f32>());
    let kv = g.constant(k.cast::<f32>());
    let y = g.conv2d(xv, kv, None, 1, 0).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    let f32_grad = grads.get(xv).unwrap().cast::<f64>();
    let r = gradient_check(
        |g, x| {
            let k = g.constant(k.clone());
            let y = g.conv2d(x, k, None, 1, 0)?;
            g.sum(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert_ok("conv2d/f64", r);
    let mut g64 = Graph::<f64>::new();
    let xv = g64.param(x.clone());
    let kv = g64.constant(k.clone());
    let y = g64.conv2d(xv, kv, None, 1, 0).unwrap();
    let s = g64.sum(y).unwrap();
    let exact = g64.backward(s).unwrap().get(xv).unwrap().clone();
    for (a, b) in f32_grad.data().iter().zip(exact.data()) {
        assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
    }
}

#[test]
fn maxpool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&[2, 2, 6, 5], &mut rng);
    let r = gradient_check(|g, x| { let y = g.maxpool2d(x, 2, 2, 0)?; weighted_sum(g, y, 3) }, &x, 1e-6).unwrap();
    assert_ok("maxpool", r);
    let r = gradient_check(|g, x| { let y = g.maxpool2d(x, 3, 2, 1)?; weighted_sum(g, y, 3) }, &x, 1e-6).unwrap();
    assert_ok("maxpool/pad", r);
    let r = gradient_check(|g, x| { let y = g.adaptive_maxpool2d(x, 4, 3)?; weighted_sum(g, y, 3) }, &x, 1e-6).unwrap();
    assert_ok("adaptive_maxpool", r);
    let r = gradient_check(|g, x| { let y = g.global_avg_pool(x)?; weighted_sum(g, y, 3) }, &x, 1e-5).unwrap();
    assert_ok("global_avg_pool", r);
}

#[test]
fn dense_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(&[3, 4], &mut rng);
    let w = random(&[4, 5], &mut rng);
    let b = random(&[5], &mut rng);
    let (wc, bc) = (w.clone(), b.clone());
    let r = gradient_check(
        |g, x| {
            let w = g.constant(wc.clone());
            let b = g.constant(bc.clone());
            let y = g.dense(x, w, Some(b))?;
            weighted_sum(g, y, 4)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert_ok("dense/x", r);
    let xc = x.clone();
    let r = gradient_check(
        |g, w| {
            let x = g.constant(xc.clone());
            let b = g.constant(bc.clone());
            let y = g.dense(x, w, Some(b))?;
            weighted_sum(g, y, 4)
        },
        &w,
        1e-3,
    )
    .unwrap();
    assert_ok("dense/w", r);
    let r = gradient_check(
        |g, b| {
            let x = g.constant(xc.clone());
            let w = g.constant(w.clone());
            let y = g.dense(x, w, Some(b))?;
            weighted_sum(g, y, 4)
        },
        &b,
        1e-3,
    )
    .unwrap();
    assert_ok("dense/b", r);
}

#[test]
fn batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = random(&[3, 2, 3, 2], &mut rng);
    let gamma = random(&[2], &mut rng);
    let beta = random(&[2], &mut rng);
    for mode in [Mode::Train, Mode::Eval] {
        let mut stats = BatchNormStats::from_tensors(random(&[2], &mut rng), Tensor::full(&[2], 0.7));
        let (gc, bc) = (gamma.clone(), beta.clone());
        let frozen = stats.clone();
        let r = gradient_check(
            |g, x| {
                let ga = g.constant(gc.clone());
                let be = g.constant(bc.clone());
                let mut s = frozen.clone();
                let y = g.batch_norm2d(x, ga, be, &mut s, mode)?;
                weighted_sum(g, y, 5)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_ok("batch_norm/x", r);
        let xc = x.clone();
        let r = gradient_check(
            |g, ga| {
                let xv = g.constant(xc.clone());
                let be = g.constant(bc.clone());
                let y = g.batch_norm2d(xv, ga, be, &mut stats, mode)?;
                weighted_sum(g, y, 5)
            },
            &gamma,
            1e-5,
        )
        .unwrap();
        assert_ok("batch_norm/gamma", r);
    }
    let xc = x.clone();
    let r = gradient_check(
        |g, be| {
            let xv = g.constant(xc.clone());
            let ga = g.constant(gamma.clone());
            let mut s = BatchNormStats::new(2);
            let y = g.batch_norm2d(xv, ga, be, &mut s, Mode::Train)?;
            weighted_sum(g, y, 5)
        },
        &beta,
        1e-5,
    )
    .unwrap();
    assert_ok("batch_norm/beta", r);
}

#[test]
fn relu_gradient_matches_mask() {
    let x = Tensor::new(&[6], vec![-0.9, 0.4, -0.2, 1.3, 0.15, -0.5]).unwrap();
    let mut g = Graph::<f64>::new();
    let xv = g.param(x.clone());
    let y = g.relu(xv).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    let mask: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    assert_eq!(grads.get(xv).unwrap().data(), &mask[..]);
    let r = gradient_check(|g, x| { let y = g.relu(x)?; weighted_sum(g, y, 6) }, &x, 1e-3).unwrap();
    assert_ok("relu", r);
}

#[test]
fn dropout_gradient_uses_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random(&[4, 5], &mut rng);
    let r = gradient_check(
        |g, x| {
            // a fresh identically-seeded rng per evaluation fixes the mask
            let mut r = ChaCha8Rng::seed_from_u64(99);
            let y = g.dropout(x, 0.3, Mode::Train, &mut r)?;
            weighted_sum(g, y, 7)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert_ok("dropout", r);
}

#[test]
fn softmax_family_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = random(&[3, 4], &mut rng);
    for axis in [0, 1] {
        let r = gradient_check(|g, x| { let y = g.softmax(x, axis)?; weighted_sum(g, y, 8) }, &x, 1e-4).unwrap();
        assert_ok("softmax", r);
        let r = gradient_check(|g, x| { let y = g.log_softmax(x, axis)?; weighted_sum(g, y, 8) }, &x, 1e-4).unwrap();
        assert_ok("log_softmax", r);
    }
    let r = gradient_check(|g, x| g.cross_entropy(x, &[0, 3, 1]), &x, 1e-4).unwrap();
    assert_ok("cross_entropy", r);
}

#[test]
fn kl_gradients_through_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let p_logits = random(&[4, 3], &mut rng);
    let q_logits = random(&[4, 3], &mut rng);
    let pl = p_logits.clone();
    let r = gradient_check(
        |g, q| {
            let pv = g.constant(pl.clone());
            let p = g.softmax(pv, 1)?;
            let q = g.softmax(q, 1)?;
            g.kl_divergence(p, q)
        },
        &q_logits,
        1e-4,
    )
    .unwrap();
    assert_ok("kl/q", r);
    let r = gradient_check(
        |g, p| {
            let qv = g.constant(q_logits.clone());
            let q = g.softmax(qv, 1)?;
            let p = g.softmax(p, 1)?;
            g.kl_divergence(p, q)
        },
        &p_logits,
        1e-4,
    )
    .unwrap();
    assert_ok("kl/p", r);
}

#[test]
fn reshape_scale_mean_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let x = random(&[2, 3, 2], &mut rng);
    let r = gradient_check(
        |g, x| {
            let f = g.flatten(x)?;
            let s = g.scale(f, -1.5)?;
            let r = g.reshape(s, &[3, 4])?;
            let sq = g.mul(r, r)?;
            g.mean(sq)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert_ok("reshape/scale/mean", r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_and_pool_random_shapes(
        n in 1usize..3, c in 1usize..4, h in 3usize..7, w in 3usize..7,
        f in 1usize..4, kh in 1usize..4, kw in 1usize..4, seed in 0u64..1000,
    ) {
        prop_assume!(kh <= h && kw <= w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, c, h, w], &mut rng);
        let k = random(&[f, c, kh, kw], &mut rng);
        let r = gradient_check(|g, x| {
            let kv = g.constant(k.clone());
            let y = g.conv2d(x, kv, None, 1, 0)?;
            let y = g.relu(y)?;
            weighted_sum(g, y, seed)
        }, &x, 1e-6).unwrap();
        prop_assert!(r.max_rel_error < TOL, "{:?}", r);
        let r = gradient_check(|g, x| {
            let y = g.maxpool2d(x, 2, 2, 0)?;
            weighted_sum(g, y, seed)
        }, &x, 1e-6).unwrap();
        prop_assert!(r.max_rel_error < TOL, "{:?}", r);
    }

    #[test]
    fn dense_random_shapes(n in 1usize..6, d in 1usize..6, o in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, d], &mut rng);
        let w = random(&[d, o], &mut rng);
        let r = gradient_check(|g, x| {
            let wv = g.constant(w.clone());
            let y = g.dense(x, wv, None)?;
            weighted_sum(g, y, seed)
        }, &x, 1e-4).unwrap();
        prop_assert!(r.max_rel_error < TOL, "{:?}", r);
    }

    #[test]
    fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e4f32..1e4, 2..7)) {
        let k = row.len();
        let mut g = Graph::<f32>::inference();
        let x = g.constant(Tensor::new(&[1, k], row).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let s: f64 = g.value(y).unwrap().data().iter().map(|&v| v as f64).sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kl_is_non_negative(a in proptest::collection::vec(-5.0f64..5.0, 3), b in proptest::collection::vec(-5.0f64..5.0, 3)) {
        let mut g = Graph::<f64>::inference();
        let av = g.constant(Tensor::new(&[1, 3], a).unwrap());
        let bv = g.constant(Tensor::new(&[1, 3], b).unwrap());
        let p = g.softmax(av, 1).unwrap();
        let q = g.softmax(bv, 1).unwrap();
        let kl = g.kl_divergence(p, q).unwrap();
        prop_assert!(g.value(kl).unwrap().item().unwrap() >= -1e-15);
    }
}
