mod common;

use common::ops::{all_ops, dims, rand_tensor};
use distpro::autodiff::{grad_check, GradCheck, Graph, Tensor};
use distpro::oracle::naive_conv;
use distpro::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        for c in all_ops(seed) {
            prop_assert!(c.passed, "{}", c.detail);
        }
    }

    #[test]
    fn softmax_is_a_distribution(seed in any::<u64>(), axis in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [dims(&mut rng, 1, 4), dims(&mut rng, 1, 5), dims(&mut rng, 1, 4)];
        let x = rand_tensor(&mut rng, &shape, -30.0, 30.0);
        let mut g = Graph::new();
        let v = g.constant(x).unwrap();
        let s = g.softmax(v, axis).unwrap();
        let out = g.value(s).data();
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..shape[axis]).map(|a| out[(o * shape[axis] + a) * inner + i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(out.iter().all(|&p| p >= 0.0 && p <= 1.0));
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let run = || {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true).unwrap();
            let kv = g.leaf(k.clone(), true).unwrap();
            let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
            let r = g.relu(y).unwrap();
            let s = g.sum(r).unwrap();
            let grads = g.backward(s).unwrap();
            (g.value(r).clone(), grads.get(kv).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn conv_matches_naive_loops_on_50_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for case in 0..50 {
        let c = dims(&mut rng, 1, 4);
        let k = dims(&mut rng, 1, 4);
        let pad = dims(&mut rng, 0, 2);
        let stride = dims(&mut rng, 1, 3);
        let h = dims(&mut rng, k.saturating_sub(2 * pad).max(1), 9);
        let w = dims(&mut rng, k.saturating_sub(2 * pad).max(1), 9);
        let (n, o) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, 4));
        let x = rand_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let kern = rand_tensor(&mut rng, &[o, c, k, k], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[kern.shape()[0]], -1.0, 1.0);
        let mut g = Graph::new();
        let (xv, kv, bv) = (
            g.constant(x.clone()).unwrap(),
            g.constant(kern.clone()).unwrap(),
            g.constant(bias.clone()).unwrap(),
        );
        let y = g.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        let reference = naive_conv(&x, &kern, Some(&bias), stride, pad).unwrap();
        assert_eq!(g.value(y).shape(), reference.shape(), "case {case}");
        for (a, b) in g.value(y).data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn documented_op_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let id = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let p = g.matmul(a, id).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let img = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let r = g.resize_bilinear(img, 4, 4).unwrap();
    let d = g.value(r).data();
    assert_eq!([d[0], d[3], d[12], d[15]], [1.0, 2.0, 3.0, 4.0]);

    let ones = g.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
    let k = g.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
    let c = g.conv2d(ones, k, None, 1, 1).unwrap();
    let d = g.value(c).data();
    assert_eq!(d[4], 9.0);
    assert_eq!([d[0], d[2], d[6], d[8]], [4.0; 4]);
}

#[test]
fn documented_backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[2, 3], vec![0.5; 6]).unwrap(), true).unwrap();
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![2.0]), true).unwrap();
    let zero = g.constant(Tensor::from_vec(vec![0.0])).unwrap();
    let l = g.mse(x, zero).unwrap();
    let first = g.backward(l).unwrap().get(x).unwrap().clone();
    assert_eq!(first.data(), &[4.0]);
    // backward is a pure function of the recorded graph
    assert_eq!(g.backward(l).unwrap().get(x).unwrap(), &first);

    let pair = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true).unwrap();
    assert!(matches!(g.backward(pair), Err(Error::Contract(_))));
}

#[test]
fn errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    match g.matmul(a, b) {
        Err(Error::Dimension { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains('2') && detail.contains('3'), "{detail}");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(g.leaf(Tensor::from_vec(vec![f64::NAN]), true), Err(Error::Numeric(_))));
    let big = g.constant(Tensor::from_vec(vec![1e300])).unwrap();
    assert!(matches!(g.mul(big, big), Err(Error::Numeric(_))));
}

#[test]
fn three_layer_mlp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let params = vec![
        rand_tensor(&mut rng, &[4, 6], -0.8, 0.8),
        rand_tensor(&mut rng, &[1, 6], -0.2, 0.2),
        rand_tensor(&mut rng, &[6, 5], -0.8, 0.8),
        rand_tensor(&mut rng, &[1, 5], -0.2, 0.2),
        rand_tensor(&mut rng, &[5, 3], -0.8, 0.8),
        rand_tensor(&mut rng, &[1, 3], -0.2, 0.2),
    ];
    let labels = [0, 2, 1, 1, 0];
    let cfg = GradCheck {
        h: 1e-5,
        tol: 1e-6,
        floor: 1e-4,
    };
    let report = grad_check(
        |g, v| {
            let mut h = g.constant(x.clone())?;
            for layer in 0..3 {
                let z = g.matmul(h, v[2 * layer])?;
                let z = g.add(z, v[2 * layer + 1])?;
                h = if layer < 2 { g.sigmoid(z)? } else { z };
            }
            g.cross_entropy(h, &labels)
        },
        &params,
        cfg,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}
