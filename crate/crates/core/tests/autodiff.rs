use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semix::tensor::gradcheck::{self, ShadowLoss};
use semix::tensor::{Element, Tape, Tensor, Var};
use semix::Error;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

// ---- oracles ---------------------------------------------------------------

fn matmul_oracle(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * ho * wo];
    for b in 0..n {
        for fo in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((fo * c + ci) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((b * f + fo) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (vec![n, f, ho, wo], out)
}

// ---- matmul ----------------------------------------------------------------

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::<f32>::new();
    let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
    let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[5., 6., 7., 8.]);

    let a = tape.constant(t(&[1, 2], &[1., 2.])).unwrap();
    let b = tape.constant(t(&[2, 1], &[3., 4.])).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let expect = matmul_oracle(a.data(), b.data(), 3, 4, 2);
    let mut tape = Tape::<f32>::new();
    let (va, vb) = (tape.constant(a).unwrap(), tape.constant(b).unwrap());
    let c = tape.matmul(va, vb).unwrap();
    for (got, want) in tape.value(c).data().iter().zip(expect) {
        assert!((*got as f64 - want).abs() <= 1e-6);
    }
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros([2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros([2, 3])).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
}

// ---- conv2d ----------------------------------------------------------------

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 1, 5, 5]);
    let mut tape = Tape::<f32>::new();
    let vx = tape.constant(x.clone()).unwrap();
    let k = tape.constant(Tensor::ones([1, 1, 1, 1])).unwrap();
    let y = tape.conv2d(vx, k, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn conv_all_ones_kernel_on_twos() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full([1, 1, 3, 3], 2.0)).unwrap();
    let k = tape.constant(Tensor::ones([1, 1, 3, 3])).unwrap();
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[18.]);
}

#[test]
fn conv_matches_six_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(stride, pad) in &[(1, 1), (1, 0), (2, 1)] {
        let x = random(&mut rng, &[2, 3, 8, 8]);
        let w = random(&mut rng, &[4, 3, 3, 3]);
        if (8 + 2 * pad - 3) % stride != 0 {
            continue;
        }
        let (shape, expect) = conv_oracle(&x, &w, stride, pad);
        let mut tape = Tape::<f32>::new();
        let (vx, vw) = (tape.constant(x).unwrap(), tape.constant(w).unwrap());
        let y = tape.conv2d(vx, vw, stride, pad).unwrap();
        assert_eq!(tape.value(y).shape(), shape.as_slice());
        for (got, want) in tape.value(y).data().iter().zip(expect) {
            assert!((*got as f64 - want).abs() <= 1e-5, "stride {stride} pad {pad}");
        }
    }
}

#[test]
fn conv_non_integral_extent_rejected() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 1, 8, 8])).unwrap();
    let k = tape.constant(Tensor::zeros([1, 1, 3, 3])).unwrap();
    assert!(matches!(tape.conv2d(x, k, 2, 0), Err(Error::Dimension(_))));
    let big = tape.constant(Tensor::zeros([1, 1, 9, 9])).unwrap();
    assert!(matches!(tape.conv2d(x, big, 1, 0), Err(Error::Dimension(_))));
}

// ---- elementwise -------------------------------------------------------------

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(t(&[3], &[-1., 0., 3.])).unwrap();
    let r = tape.relu(v).unwrap();
    assert_eq!(tape.value(r).data(), &[0., 0., 3.]);

    let a = tape.constant(t(&[2], &[2., 0.])).unwrap();
    let b = tape.constant(t(&[2], &[0., 2.])).unwrap();
    let m = tape.scale_add(a, b, 0.5).unwrap();
    assert_eq!(tape.value(m).data(), &[1., 1.]);

    let c = tape.constant(t(&[2], &[1., 2.])).unwrap();
    assert!(matches!(tape.scale_add(a, v, 0.5), Err(Error::Dimension(_))));
    assert!(matches!(tape.scale_add(a, c, f64::NAN), Err(Error::Validation(_))));
}

#[test]
fn avgpool_and_bias() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[1, 2, 2, 2], &[1., 2., 3., 4., 10., 10., 10., 10.])).unwrap();
    let p = tape.avgpool2d(x, 2).unwrap();
    assert_eq!(tape.value(p).data(), &[2.5, 10.]);
    let b = tape.constant(t(&[2], &[1., -1.])).unwrap();
    let y = tape.bias_add(x, b).unwrap();
    assert_eq!(tape.value(y).data(), &[2., 3., 4., 5., 9., 9., 9., 9.]);
    let bad = tape.constant(t(&[3], &[0., 0., 0.])).unwrap();
    assert!(tape.bias_add(x, bad).is_err());
    let odd = tape.constant(Tensor::zeros([1, 1, 3, 3])).unwrap();
    assert!(tape.avgpool2d(odd, 2).is_err());
}

proptest! {
    #[test]
    fn self_mix_is_identity(values in prop::collection::vec(-10.0f32..10.0, 1..32), lambda in 0.0f64..=1.0) {
        let x = Tensor::new([values.len()], values).unwrap();
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(x.clone()).unwrap();
        let b = tape.constant(x.clone()).unwrap();
        let m = tape.scale_add(a, b, lambda).unwrap();
        prop_assert_eq!(tape.value(m).data(), x.data());
    }

    #[test]
    fn scale_add_backward_is_linear(n in 1usize..16, lambda in 0.0f64..=1.0, up in -3.0f64..3.0) {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::zeros([n])).unwrap();
        let b = tape.param(Tensor::ones([n])).unwrap();
        let m = tape.scale_add(a, b, lambda).unwrap();
        let s = tape.sum(m).unwrap();
        let loss = tape.scale(s, up).unwrap();
        tape.backward(loss).unwrap();
        let (l, u) = (lambda as f32, up as f32);
        for &g in tape.grad(a).unwrap() {
            prop_assert!((g - u * l).abs() <= 1e-6);
        }
        for &g in tape.grad(b).unwrap() {
            prop_assert!((g - u * (1.0 - l)).abs() <= 1e-6);
        }
    }
}

// ---- softmax cross-entropy -------------------------------------------------

#[test]
fn cross_entropy_uniform_logits() {
    let mut tape = Tape::<f32>::new();
    let z = tape.constant(Tensor::zeros([1, 4])).unwrap();
    let loss = tape.softmax_cross_entropy(z, &t(&[1, 4], &[0., 0., 1., 0.])).unwrap();
    assert!((tape.value(loss).item().unwrap() - 4f32.ln()).abs() < 1e-6);
}

#[test]
fn cross_entropy_of_own_softmax_is_entropy() {
    let logits = [0.3f64, -1.2, 2.0];
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let s: f64 = logits.iter().map(|z| (z - m).exp()).sum();
    let p: Vec<f64> = logits.iter().map(|z| (z - m).exp() / s).collect();
    let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::new([1, 3], logits.to_vec()).unwrap()).unwrap();
    let loss = tape.softmax_cross_entropy(z, &Tensor::new([1, 3], p).unwrap()).unwrap();
    assert!((tape.value(loss).item().unwrap() - entropy).abs() < 1e-12);
}

#[test]
fn cross_entropy_linear_in_mixed_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&mut rng, &[1, 5]).cast::<f64>();
    let lambda = 0.37;
    let yi = Tensor::<f64>::from_f64([1, 5], &[1., 0., 0., 0., 0.]).unwrap();
    let yj = Tensor::<f64>::from_f64([1, 5], &[0., 0., 0., 1., 0.]).unwrap();
    let mixed = Tensor::<f64>::from_f64([1, 5], &[lambda, 0., 0., 1.0 - lambda, 0.]).unwrap();
    let ce = |target: &Tensor<f64>| {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(logits.clone()).unwrap();
        let l = tape.softmax_cross_entropy(z, target).unwrap();
        tape.value(l).item().unwrap()
    };
    let lhs = ce(&mixed);
    let rhs = lambda * ce(&yi) + (1.0 - lambda) * ce(&yj);
    assert!((lhs - rhs).abs() < 1e-6);
}

#[test]
fn cross_entropy_rejects_bad_targets() {
    let mut tape = Tape::<f32>::new();
    let z = tape.constant(Tensor::zeros([1, 3])).unwrap();
    assert!(matches!(
        tape.softmax_cross_entropy(z, &t(&[1, 3], &[0.5, 0.4, 0.])),
        Err(Error::Validation(_))
    ));
    let z1 = tape.constant(Tensor::zeros([1, 1])).unwrap();
    assert!(matches!(tape.softmax_cross_entropy(z1, &t(&[1, 1], &[1.])), Err(Error::Validation(_))));
}

// ---- l2 norm -------------------------------------------------------------------

#[test]
fn l2_norm_examples() {
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(t(&[2], &[3., 4.])).unwrap();
    let n = tape.l2_norm(v).unwrap();
    assert!((tape.value(n).item().unwrap() - 5.0).abs() < 1e-6);

    let z = tape.param(Tensor::zeros([3])).unwrap();
    let nz = tape.l2_norm(z).unwrap();
    assert!((tape.value(nz).item().unwrap() - 1e-6).abs() < 1e-9);
    tape.backward(nz).unwrap();
    assert_eq!(tape.grad(z).unwrap(), &[0., 0., 0.]);
}

#[test]
fn l2_norm_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = random(&mut rng, &[16]);
    let mut ss = 0.0f64;
    for x in v.data() {
        ss += (*x as f64) * (*x as f64);
    }
    let expect = ss.sqrt();
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(v).unwrap();
    let n = tape.l2_norm(x).unwrap();
    let got = tape.value(n).item().unwrap() as f64;
    assert!((got - expect).abs() / expect <= 1e-6);
}

// ---- backward ------------------------------------------------------------------

#[test]
fn backward_square() {
    let mut tape = Tape::<f32>::new();
    let w = tape.param(t(&[1], &[3.])).unwrap();
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[6.]);
}

#[test]
fn backward_scale_add_sum() {
    let mut tape = Tape::<f32>::new();
    let a = tape.param(Tensor::zeros([4])).unwrap();
    let b = tape.param(Tensor::zeros([4])).unwrap();
    let m = tape.scale_add(a, b, 0.3).unwrap();
    let loss = tape.sum(m).unwrap();
    tape.backward(loss).unwrap();
    for &g in tape.grad(a).unwrap() {
        assert!((g - 0.3).abs() < 1e-7);
    }
    for &g in tape.grad(b).unwrap() {
        assert!((g - 0.7).abs() < 1e-7);
    }
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f32>::new();
    let a = tape.param(Tensor::zeros([2])).unwrap();
    assert!(matches!(tape.backward(a), Err(Error::Usage(_))));
}

#[test]
fn reuse_accumulates_like_duplicated_variable() {
    // f(w) = sum(relu(w) * w) + l2(w); compare the shared-use gradient with
    // a graph where each use reads its own copy and the copies' grads are summed.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w0 = random(&mut rng, &[6]);

    let mut tape = Tape::<f32>::new();
    let w = tape.param(w0.clone()).unwrap();
    let r = tape.relu(w).unwrap();
    let p = tape.mul(r, w).unwrap();
    let s = tape.sum(p).unwrap();
    let n = tape.l2_norm(w).unwrap();
    let loss = tape.add(s, n).unwrap();
    tape.backward(loss).unwrap();
    let shared = tape.grad(w).unwrap().to_vec();

    let mut tape = Tape::<f32>::new();
    let w1 = tape.param(w0.clone()).unwrap();
    let w2 = tape.param(w0.clone()).unwrap();
    let w3 = tape.param(w0).unwrap();
    let r = tape.relu(w1).unwrap();
    let p = tape.mul(r, w2).unwrap();
    let s = tape.sum(p).unwrap();
    let n = tape.l2_norm(w3).unwrap();
    let loss = tape.add(s, n).unwrap();
    tape.backward(loss).unwrap();
    for i in 0..6 {
        let total = tape.grad(w1).unwrap()[i] + tape.grad(w2).unwrap()[i] + tape.grad(w3).unwrap()[i];
        assert!((shared[i] - total).abs() <= 1e-6);
    }
}

#[test]
fn tape_is_topologically_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(random(&mut rng, &[2, 3])).unwrap();
    let w = tape.param(random(&mut rng, &[3, 4])).unwrap();
    let h = tape.matmul(x, w).unwrap();
    let r = tape.relu(h).unwrap();
    let loss = tape.l2_norm(r).unwrap();
    for i in 0..tape.len() {
        let v = tape.var(i).unwrap();
        for input in tape.inputs(v) {
            assert!(input.index() < i);
        }
    }
    assert_eq!(tape.op_name(loss), "l2_norm");
}

#[test]
fn non_finite_values_are_errors() {
    let mut tape = Tape::<f32>::new();
    assert!(matches!(tape.constant(t(&[1], &[f32::NAN])), Err(Error::NonFinite { .. })));
    let big = tape.constant(t(&[1, 1], &[3e38])).unwrap();
    let two = tape.constant(t(&[1, 1], &[10.])).unwrap();
    assert!(matches!(tape.matmul(big, two), Err(Error::NonFinite { op: "matmul" })));
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(random(&mut rng, &[2, 2, 6, 6])).unwrap();
        let k = tape.param(random(&mut rng, &[3, 2, 3, 3])).unwrap();
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        let r = tape.relu(y).unwrap();
        let loss = tape.l2_norm(r).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(loss).data().to_vec(), tape.grad(k).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

// ---- finite-difference soundness, one composite per operator family --------

struct Composite {
    x: Tensor,
    targets: Tensor,
}

impl ShadowLoss for Composite {
    fn record<T: Element>(&self, tape: &mut Tape<T>, p: &[Var]) -> semix::Result<Var> {
        // p: kernel[2x1x3x3], conv bias[2], dense[8x3], dense bias[3]
        let x = tape.constant(self.x.cast())?;
        let c = tape.conv2d(x, p[0], 1, 1)?;
        let c = tape.bias_add(c, p[1])?;
        let r = tape.relu(c)?;
        let pooled = tape.avgpool2d(r, 2)?;
        let flat = tape.flatten(pooled)?;
        let z = tape.matmul(flat, p[2])?;
        let z = tape.bias_add(z, p[3])?;
        let ce = tape.softmax_cross_entropy(z, &self.targets.cast())?;
        let half = tape.reshape(flat, &[2, 8])?;
        let swapped = tape.sub(flat, half)?;
        let mixed = tape.scale_add(flat, swapped, 0.3)?;
        let norms = tape.row_norms(mixed, false)?;
        let pen = tape.mean(norms)?;
        let sq = tape.row_norms(mixed, true)?;
        let sq = tape.sum(sq)?;
        let sq = tape.scale(sq, 0.01)?;
        let l2 = tape.l2_norm(p[2])?;
        let total = tape.add(ce, pen)?;
        let total = tape.add(total, sq)?;
        tape.add(total, l2)
    }
}

#[test]
fn composite_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = vec![
        random(&mut rng, &[2, 1, 3, 3]),
        random(&mut rng, &[2]),
        random(&mut rng, &[8, 3]),
        random(&mut rng, &[3]),
    ];
    let loss = Composite {
        x: random(&mut rng, &[2, 1, 4, 4]),
        targets: t(&[2, 3], &[0.25, 0.75, 0., 0., 0., 1.]),
    };
    let report = gradcheck::check(&loss, &params, gradcheck::STEP).unwrap();
    assert!(report.checked > 30, "{report:?}");
    assert!(report.max_rel_error <= 1e-3, "{report:?}");
}
