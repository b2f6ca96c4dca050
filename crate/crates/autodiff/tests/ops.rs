use djscc_autodiff::gradcheck::{all_op_cases, run_case};
use djscc_autodiff::{Graph, Tensor, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

/// Six nested loops, cross-correlation convention.
fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[oi];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xx * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oi * c + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn(&[2, 1, 5, 4], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let w = g.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
    let b = g.constant(t(&[1], &[0.0])).unwrap();
    let y = g.conv2d(xv, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_sums_window() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let w = g.constant(Tensor::ones(&[1, 1, 2, 2])).unwrap();
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[10.0]);
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let x = Tensor::<f64>::randn(&[3, 3, 8, 7], &mut rng);
        let w = Tensor::<f64>::randn(&[4, 3, 3, 3], &mut rng);
        let b = Tensor::<f64>::randn(&[4], &mut rng);
        let (shape, expected) = naive_conv2d(&x, &w, &b, stride, pad);
        let mut g = Graph::new();
        let (xv, wv, bv) = (
            g.constant(x).unwrap(),
            g.constant(w).unwrap(),
            g.constant(b).unwrap(),
        );
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(g.value(y).shape(), shape.as_slice());
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }
}

#[test]
fn conv2d_shape_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(TensorError::InvalidShape { .. })));
    let big = g.constant(Tensor::zeros(&[1, 2, 7, 7])).unwrap();
    assert!(g.conv2d(x, big, None, 1, 1).is_err());
    let w2 = g.constant(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
    assert!(g.conv2d(x, w2, None, 0, 1).is_err());
}

#[test]
fn linear_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let w = g.constant(t(&[1, 2], &[3.0, 4.0])).unwrap();
    let b = g.constant(t(&[1], &[5.0])).unwrap();
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[16.0]);

    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let y = g.linear(x, eye, None).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let bad = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(g.linear(x, bad, None), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn linear_matches_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn(&[5, 7], &mut rng);
    let w = Tensor::<f64>::randn(&[3, 7], &mut rng);
    let b = Tensor::<f64>::randn(&[3], &mut rng);
    let mut g = Graph::new();
    let (xv, wv, bv) = (
        g.constant(x.clone()).unwrap(),
        g.constant(w.clone()).unwrap(),
        g.constant(b.clone()).unwrap(),
    );
    let y = g.linear(xv, wv, Some(bv)).unwrap();
    for n in 0..5 {
        for o in 0..3 {
            let dot: f64 = (0..7).map(|i| x.data()[n * 7 + i] * w.data()[o * 7 + i]).sum();
            let got = g.value(y).data()[n * 3 + o];
            assert!((got - dot - b.data()[o]).abs() < 1e-6);
        }
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let w = g.param(Tensor::<f64>::randn(&[2, 3], &mut ChaCha8Rng::seed_from_u64(4))).unwrap();
    let s = g.sum(w).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(w).unwrap(), &Tensor::ones(&[2, 3]));

    let mut g = Graph::new();
    let w = g.param(t(&[2], &[1.0, -2.0])).unwrap();
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let w = g.param(t(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(w), Err(TensorError::NonScalarLoss(_))));
    let s = g.sum(w).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.backward(s).unwrap_err(), TensorError::GraphConsumed);
    g.reset();
    let w = g.param(t(&[2], &[1.0, 2.0])).unwrap();
    let s = g.sum(w).unwrap();
    assert!(g.backward(s).is_ok());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f32>::new();
    assert!(g.constant(Tensor::full(&[1], f32::NAN)).is_err());
    let x = g.constant(Tensor::full(&[1], 1e30)).unwrap();
    assert!(matches!(g.mul(x, x), Err(TensorError::NonFinite { op: "mul" })));
}

#[test]
fn group_norm_of_constant_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 4, 3, 3], 7.5)).unwrap();
    let gamma = g.constant(Tensor::ones(&[4])).unwrap();
    let beta = g.constant(Tensor::zeros(&[4])).unwrap();
    let y = g.group_norm(x, gamma, beta, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert!(g.group_norm(x, gamma, beta, 3).is_err());
}

#[test]
fn upsample_replicates_blocks() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let y = g.upsample_nearest(x, 2).unwrap();
    assert_eq!(
        g.value(y).data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::randn(&[6, 9], &mut rng).map(|v| 4.0 * v)).unwrap();
    let y = g.softmax(x).unwrap();
    for row in g.value(y).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn concat_and_pool_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3, 4, 4])).unwrap();
    let b = g.constant(Tensor::ones(&[2, 5, 4, 4])).unwrap();
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 8, 4, 4]);
    let p = g.avg_pool(c, 2).unwrap();
    assert_eq!(g.shape(p), &[2, 8, 2, 2]);
    let odd = g.constant(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
    assert!(g.avg_pool(odd, 2).is_err());
    let wrong = g.constant(Tensor::zeros(&[2, 5, 3, 4])).unwrap();
    assert!(g.concat(&[a, wrong], 1).is_err());
}

#[test]
fn conv_transpose_doubles_resolution() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones(&[1, 3, 4, 4])).unwrap();
    let w = g.constant(Tensor::ones(&[3, 2, 4, 4])).unwrap();
    let y = g.conv_transpose2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 8, 8]);
}

#[test]
fn every_op_passes_finite_differences() {
    for (i, case) in all_op_cases().iter().enumerate() {
        let outcome = run_case(case, 20, 1e-5, 100 + i as u64).unwrap();
        assert!(
            outcome.max_rel_err < 1e-4,
            "{}: relative error {:.3e}",
            outcome.op,
            outcome.max_rel_err
        );
    }
}

#[test]
fn identical_inputs_give_identical_bits() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::randn(&[2, 3, 6, 6], &mut rng)).unwrap();
        let w = g.param(Tensor::randn(&[4, 3, 3, 3], &mut rng)).unwrap();
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        let y = g.silu(y).unwrap();
        let l = g.mean(y).unwrap();
        let mut grads = g.backward(l).unwrap();
        (g.value(l).clone(), grads.take(w).unwrap())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn conv2d_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[1, 2, 5, 5], &mut rng);
        let y = Tensor::<f64>::randn(&[1, 2, 5, 5], &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], &mut rng);
        let conv = |input: &Tensor<f64>| {
            let mut g = Graph::new();
            let iv = g.constant(input.clone()).unwrap();
            let wv = g.constant(w.clone()).unwrap();
            let out = g.conv2d(iv, wv, None, 1, 1).unwrap();
            g.value(out).clone()
        };
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv(&mix);
        let rhs = conv(&x).zip_map(&conv(&y), |p, q| a * p + b * q).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-5);
        }
    }
}
