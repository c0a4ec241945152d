use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0f32..1.0))
}

fn naive_matmul(x: &[f32], w: &[f32], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            for i in 0..inner {
                out[r * cols + c] += x[r * inner + i] as f64 * w[i * cols + c] as f64;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f32],
    k: &[f32],
    (b, c, h, w): (usize, usize, usize, usize),
    (f, kh, kw): (usize, usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0f64; b * f * oh * ow];
    for bi in 0..b {
        for fi in 0..f {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * stride.0 + ki) as isize - pad.0 as isize;
                                let jj = (oj * stride.1 + kj) as isize - pad.1 as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                let xv = x[((bi * c + ci) * h + ii as usize) * w + jj as usize];
                                let kv = k[((fi * c + ci) * kh + ki) * kw + kj];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&p, &q)| (p as f64 - q).abs()).fold(0.0, f64::max)
}

#[test]
fn linear_identity_and_zero_weight() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zero_b = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.linear(x, eye, zero_b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let zw = g.constant(Tensor::zeros(vec![2, 2]));
    let b = g.constant(t(&[2], &[3.0, 4.0]));
    let y = g.linear(x, zw, b).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 4.0]);
}

#[test]
fn linear_matches_naive_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (xv, wv) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng));
    let mut g = Graph::<f32>::new();
    let x = g.constant(xv.clone());
    let w = g.constant(wv.clone());
    let b = g.constant(Tensor::zeros(vec![2]));
    let y = g.linear(x, w, b).unwrap();
    let oracle = naive_matmul(xv.data(), wv.data(), 3, 4, 2);
    assert!(max_abs_diff(g.value(y).data(), &oracle) < 1e-6);
}

#[test]
fn linear_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![2, 3]));
    let w = g.constant(Tensor::zeros(vec![4, 2]));
    let b = g.constant(Tensor::zeros(vec![2]));
    match g.linear(x, w, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected dimension error, got {:?}", other.map(|v| v.id())),
    }
}

#[test]
fn conv_scalar_kernel_scales_input() {
    let mut g = Graph::<f32>::new();
    let data: Vec<f32> = (0..9).map(|v| v as f32).collect();
    let x = g.constant(t(&[1, 1, 3, 3], &data));
    let k = g.constant(t(&[1, 1, 1, 1], &[2.0]));
    let y = g.conv2d(x, k, (1, 1), (0, 0)).unwrap();
    let expected: Vec<f32> = data.iter().map(|v| v * 2.0).collect();
    assert_eq!(g.value(y).data(), &expected[..]);
}

#[test]
fn conv_zero_input_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let k = g.constant(random(&[3, 2, 3, 3], &mut rng));
    let y = g.conv2d(x, k, (1, 1), (1, 1)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, pad) in [((1, 1), (0, 0)), ((1, 1), (1, 1)), ((2, 1), (1, 0))] {
        let (xv, kv) = (random(&[1, 2, 5, 5], &mut rng), random(&[3, 2, 3, 3], &mut rng));
        let mut g = Graph::<f32>::new();
        let x = g.constant(xv.clone());
        let k = g.constant(kv.clone());
        let y = g.conv2d(x, k, stride, pad).unwrap();
        let (oracle, oh, ow) = naive_conv(xv.data(), kv.data(), (1, 2, 5, 5), (3, 3, 3), stride, pad);
        assert_eq!(g.shape(y), &[1, 3, oh, ow]);
        assert!(max_abs_diff(g.value(y).data(), &oracle) < 1e-5);
    }
}

#[test]
fn conv_kernel_larger_than_padded_input_is_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
    let k = g.constant(Tensor::zeros(vec![1, 1, 5, 5]));
    assert!(matches!(g.conv2d(x, k, (1, 1), (1, 1)), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(t(&[2], &[0.0, 0.0]));
    let sa = g.softmax(a, 0).unwrap();
    assert_eq!(g.value(sa).data(), &[0.5, 0.5]);

    let b = g.constant(t(&[3], &[1000.0, 1000.0, 1000.0]));
    let sb = g.softmax(b, 0).unwrap();
    for &v in g.value(sb).data() {
        assert!((v as f64 - 1.0 / 3.0).abs() < 1e-6);
    }

    let c = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let sc = g.softmax(c, 0).unwrap();
    let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let oracle: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / denom).collect();
    assert!(max_abs_diff(g.value(sc).data(), &oracle) < 1e-6);
}

#[test]
fn softmax_over_leading_axis() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
    let s = g.softmax(x, 0).unwrap();
    let v = g.value(s).data();
    assert_eq!(v[0], 0.5);
    assert_eq!(v[2], 0.5);
    assert!((v[1] + v[3] - 1.0).abs() < 1e-6);
}

#[test]
fn softmax_rejects_non_finite_input() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t(&[2], &[f32::NAN, 0.0]));
    assert!(matches!(g.softmax(x, 0), Err(Error::NumericInput { .. })));
}

#[test]
fn relu_and_pooling_basics() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

    let c = g.constant(Tensor::full(vec![2, 3, 4, 5], 1.75f32));
    let p = g.global_avg_pool(c).unwrap();
    assert_eq!(g.shape(p), &[2, 3]);
    assert!(g.value(p).data().iter().all(|&v| v == 1.75));
    let m = g.global_max_pool(c).unwrap();
    assert!(g.value(m).data().iter().all(|&v| v == 1.75));
}

#[test]
fn elementwise_shape_mismatch_is_an_error() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(vec![2]));
    let b = g.constant(Tensor::zeros(vec![3]));
    assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    assert!(matches!(g.mul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn backward_identity_and_square() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::scalar(3.0));
    let grads = g.backward(x).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0]);

    let mut g = Graph::<f32>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f32>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn constants_never_receive_gradients() {
    let mut g = Graph::<f32>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[5.0, 6.0]));
    let p = g.mul(x, c).unwrap();
    let l = g.sum(p).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[5.0, 6.0]);
}

#[test]
fn grad_reversal_forward_is_identity_and_backward_scales() {
    let sq_grad = |m: Option<f64>| {
        let mut g = Graph::<f32>::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = match m {
            Some(m) => g.grad_reversal(x, GrlSetting::new(m).unwrap()).unwrap(),
            None => x,
        };
        assert_eq!(g.value(y).data(), &[3.0]);
        let sq = g.mul(y, y).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap().get(x).unwrap().data()[0]
    };
    assert_eq!(sq_grad(None), 6.0);
    assert_eq!(sq_grad(Some(1.0)), 6.0);
    assert_eq!(sq_grad(Some(-1.0)), -6.0);
}

#[test]
fn grl_setting_must_be_finite() {
    assert!(GrlSetting::new(f64::NAN).is_err());
    assert!(GrlSetting::new(f64::INFINITY).is_err());
}

#[test]
fn mul_gradient_matches_finite_difference() {
    struct Prod(Tensor);
    impl Objective for Prod {
        fn build<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
            let y = g.constant(self.0.cast());
            let p = g.mul(inputs[0], y)?;
            g.sum(p)
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = random(&[6], &mut rng);
    let x = random(&[6], &mut rng);
    let report = grad_check(&Prod(y.clone()), &[x], &GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

struct Composed {
    target: Tensor,
}

impl Objective for Composed {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let (x, k, w, b) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let c = g.conv2d(x, k, (1, 1), (1, 1))?;
        let r = g.relu(c)?;
        let p = g.global_avg_pool(r)?;
        let y = g.linear(p, w, b)?;
        let s = g.sigmoid(y)?;
        let t = g.constant(self.target.cast());
        g.ccc_loss(s, t)
    }
}

#[test]
fn composed_conv_relu_linear_ccc_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let point = vec![
        random(&[4, 2, 5, 5], &mut rng),
        random(&[3, 2, 3, 3], &mut rng),
        random(&[3, 4], &mut rng),
        random(&[4], &mut rng),
    ];
    let target = Tensor::from_fn(vec![4, 4], |_| rng.gen_range(0.0f32..1.0));
    let report = grad_check(&Composed { target }, &point, &GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_error < 1e-2, "{report:?}");
}

struct LinearOnly;

impl Objective for LinearOnly {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let y = g.linear(inputs[0], inputs[1], inputs[2])?;
        let sq = g.mul(y, y)?;
        g.mean(sq)
    }
}

#[test]
fn grad_check_on_linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let point = vec![
        random(&[3, 4], &mut rng),
        random(&[4, 2], &mut rng),
        random(&[2], &mut rng),
    ];
    let report = grad_check(&LinearOnly, &point, &GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_error < 1e-2, "{report:?}");
    assert_eq!(report.inputs.len(), 3);
}

struct ReversedChain;

impl Objective for ReversedChain {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let y = g.linear(inputs[0], inputs[1], inputs[2])?;
        let r = g.grad_reversal(y, GrlSetting::new(-1.0)?)?;
        let s = g.sigmoid(r)?;
        let sq = g.mul(s, s)?;
        g.sum(sq)
    }
}

#[test]
fn grad_check_on_reversed_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let point = vec![
        random(&[2, 3], &mut rng),
        random(&[3, 2], &mut rng),
        random(&[2], &mut rng),
    ];
    let report = grad_check(&ReversedChain, &point, &GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_error < 1e-2, "{report:?}");

    // A reversal node that forgot to reverse must be caught.
    let opts = GradCheckOptions {
        fault: Some(OpKind::GradReversal),
        ..Default::default()
    };
    let report = grad_check(&ReversedChain, &point, &opts).unwrap();
    assert!(report.max_rel_error > 1.9, "{report:?}");
}

#[test]
fn grad_check_constant_loss_is_zero() {
    struct Constant;
    impl Objective for Constant {
        fn build<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
            let z = g.scale(inputs[0], 0.0)?;
            g.sum(z)
        }
    }
    let report = grad_check(&Constant, &[t(&[3], &[1.0, 2.0, 3.0])], &GradCheckOptions::default()).unwrap();
    assert_eq!(report.max_rel_error, 0.0);
}

#[test]
fn grad_check_reports_non_finite_node() {
    struct Overflow;
    impl Objective for Overflow {
        fn build<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
            let big = g.scale(inputs[0], 1e30)?;
            let sq = g.mul(big, big)?;
            g.sum(sq)
        }
    }
    let err = grad_check(&Overflow, &[t(&[1], &[1e10])], &GradCheckOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Numeric { op: "scale", node: 1 }), "{err}");
}

#[test]
fn grad_check_rejects_non_positive_eps() {
    let opts = GradCheckOptions {
        eps: 0.0,
        ..Default::default()
    };
    assert!(grad_check(&LinearOnly, &[], &opts).is_err());
}

#[test]
fn injected_fault_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let point = vec![
        random(&[2, 1, 4, 4], &mut rng),
        random(&[2, 1, 3, 3], &mut rng),
        random(&[2, 4], &mut rng),
        random(&[4], &mut rng),
    ];
    let target = Tensor::from_fn(vec![2, 4], |_| rng.gen_range(0.0f32..1.0));
    let opts = GradCheckOptions {
        fault: Some(OpKind::Conv2d),
        ..Default::default()
    };
    let report = grad_check(&Composed { target }, &point, &opts).unwrap();
    assert!(report.max_rel_error > 1.0);
}

fn reversal_graph_grads(x: &Tensor, w: &Tensor, m: f64) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut g = Graph::<f32>::new();
    let xv = g.param(x.clone());
    let wv = g.param(w.clone());
    let b = g.constant(Tensor::zeros(vec![w.shape()[1]]));
    let h = g.linear(xv, wv, b).unwrap();
    let r = g.grad_reversal(h, GrlSetting::new(m).unwrap()).unwrap();
    let s = g.sigmoid(r).unwrap();
    let out = g.value(s).data().to_vec();
    let l = g.sum(s).unwrap();
    let grads = g.backward(l).unwrap();
    (
        out,
        grads.get(xv).unwrap().data().to_vec(),
        grads.get(wv).unwrap().data().to_vec(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reversal_is_forward_transparent_and_backward_linear(
        seed in 0u64..10_000,
        m in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3], &mut rng);
        let w = random(&[3, 4], &mut rng);
        let (out1, gx1, gw1) = reversal_graph_grads(&x, &w, 1.0);
        let (outm, gxm, gwm) = reversal_graph_grads(&x, &w, m);
        prop_assert_eq!(out1, outm);
        for (a, b) in gx1.iter().chain(&gw1).zip(gxm.iter().chain(&gwm)) {
            prop_assert!((*a as f64 * m - *b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_permutation_equivariant(
        row in proptest::collection::vec(-50.0f32..50.0, 1..12),
        rot in 0usize..12,
    ) {
        let d = row.len();
        let rot = rot % d;
        let mut rotated = row.clone();
        rotated.rotate_left(rot);
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::new(vec![1, d], row.clone()).unwrap());
        let b = g.constant(Tensor::new(vec![1, d], rotated).unwrap());
        let sa = g.softmax(a, 1).unwrap();
        let sb = g.softmax(b, 1).unwrap();
        let va = g.value(sa).data().to_vec();
        let vb = g.value(sb).data().to_vec();
        let total: f64 = va.iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(va.iter().all(|&v| v >= 0.0));
        let mut va_rot = va.clone();
        va_rot.rotate_left(rot);
        for (p, q) in va_rot.iter().zip(&vb) {
            prop_assert!((p - q).abs() <= 1e-6 * p.abs().max(1e-30));
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 1, 6, 6], &mut rng);
        let k = random(&[3, 1, 3, 3], &mut rng);
        let run = || {
            let mut g = Graph::<f32>::new();
            let xv = g.constant(x.clone());
            let kv = g.constant(k.clone());
            let c = g.conv2d(xv, kv, (1, 1), (1, 1)).unwrap();
            g.value(c).data().to_vec()
        };
        prop_assert_eq!(run(), run());
    }
}
