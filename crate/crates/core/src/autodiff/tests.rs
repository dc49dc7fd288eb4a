use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn eval1(t: Tensor, f: impl FnOnce(&mut Tape, Var) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(t);
    let y = f(&mut tape, x);
    tape.value(y).clone()
}

/// Numeric check of an op's input gradient, driving a weighted sum of the
/// output so every output coordinate contributes.
fn check_op_grad(input: Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let out_len = eval1(input.clone(), |t, x| f(t, x)).len();
    let weights: Vec<f64> = (0..out_len).map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f64) / 11.0).collect();
    let loss_of = |tape: &mut Tape, x: Var| {
        let y = f(tape, x);
        let shape = tape.shape(y).to_vec();
        let w = tape.constant(Tensor::new(shape, weights.clone()).unwrap());
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    };
    let mut tape = Tape::new();
    let x = tape.variable(input.clone());
    let loss = loss_of(&mut tape, x);
    let analytic = tape.backward(loss).unwrap().wrt(x).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[k] += h;
        let mut minus = input.clone();
        minus.data_mut()[k] -= h;
        let mut t1 = Tape::new();
        let x1 = t1.constant(plus);
        let l1 = loss_of(&mut t1, x1);
        let mut t2 = Tape::new();
        let x2 = t2.constant(minus);
        let l2 = loss_of(&mut t2, x2);
        let numeric = (t1.value(l1).item().unwrap() - t2.value(l2).item().unwrap()) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[k], numeric));
    }
    worst
}

// ---------------------------------------------------------------- matmul

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a.at2(i, l) * b.at2(l, j);
            }
            out[i * n + j] = s;
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

fn matmul(a: &Tensor, b: &Tensor) -> crate::Result<Tensor> {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let z = tape.matmul(x, y)?;
    Ok(tape.value(z).clone())
}

#[test]
fn matmul_identity() {
    let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
    let id = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    assert_eq!(matmul(&a, &id).unwrap(), a);
}

#[test]
fn matmul_zero_annihilates() {
    let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
    assert_eq!(matmul(&a, &Tensor::zeros(&[2, 3])).unwrap(), Tensor::zeros(&[2, 3]));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    assert!(matmul(&a, &b).unwrap().max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_nt_matches_explicit_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 5]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let z = tape.matmul_nt(x, y).unwrap();
    let expect = matmul_oracle(&a, &b.transpose().unwrap());
    assert!(tape.value(z).max_abs_diff(&expect) < 1e-12);
}

// ---------------------------------------------------------------- softmax

fn softmax(t: Tensor) -> Tensor {
    eval1(t, |tape, x| tape.softmax_rows(x).unwrap())
}

#[test]
fn softmax_uniform_row() {
    let y = softmax(Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap());
    for &v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_shift_invariant() {
    let a = softmax(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
    let b = softmax(Tensor::from_rows(&[[101.0, 102.0]]).unwrap());
    assert!(a.max_abs_diff(&b) < 1e-15);
}

#[test]
fn softmax_reference_values() {
    // e^1, e^2, e^3 normalised; computed with 30-digit arithmetic.
    let expect = [0.090030573170380462, 0.244728471054797646, 0.665240955774821892];
    let y = softmax(Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
    for (v, e) in y.data().iter().zip(expect) {
        assert!((v - e).abs() < 1e-5);
        assert!((v - e).abs() < 1e-15);
    }
}

#[test]
fn softmax_rejects_nan() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[[0.0, f64::NAN]]).unwrap());
    assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric(_))));
}

// ---------------------------------------------------------------- elementwise

#[test]
fn sigmoid_at_zero_and_its_derivative() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::scalar(0.0));
    let y = tape.sigmoid(x);
    assert_eq!(tape.value(y).item().unwrap(), 0.5);
    let g = tape.backward(y).unwrap().wrt(x).unwrap();
    assert_eq!(g.item().unwrap(), 0.25);
}

#[test]
fn relu_negative_is_flat() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::scalar(-3.0));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).item().unwrap(), 0.0);
    assert_eq!(tape.backward(y).unwrap().wrt(x).unwrap().item().unwrap(), 0.0);
}

fn tanh_series(x: f64) -> f64 {
    // sinh and cosh from their Taylor series.
    let (mut sinh, mut cosh) = (0.0, 0.0);
    let mut term = 1.0; // x^k / k!
    for k in 0..80 {
        if k % 2 == 0 {
            cosh += term;
        } else {
            sinh += term;
        }
        term *= x / (k + 1) as f64;
    }
    sinh / cosh
}

#[test]
fn tanh_matches_series() {
    for x in [-1.0, 0.5, 2.0] {
        let y = eval1(Tensor::scalar(x), |t, v| t.tanh(v)).item().unwrap();
        assert!((y - tanh_series(x)).abs() < 1e-12, "x={x}");
    }
}

#[test]
fn log_rejects_non_positive() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
    assert!(matches!(tape.log(x), Err(Error::Domain(_))));
}

// ---------------------------------------------------------------- conv2d

fn conv(input: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> crate::Result<Tensor> {
    let mut tape = Tape::new();
    let (x, kv, bv) = (tape.constant(input.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(x, kv, bv, stride)?;
    Ok(tape.value(y).clone())
}

fn conv_oracle(input: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let [c_in, h, w] = input.shape()[..] else { panic!() };
    let [c_out, _, kk, _] = k.shape()[..] else { panic!() };
    let (oh, ow) = ((h - kk) / stride + 1, (w - kk) / stride + 1);
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = b.data()[o];
                for c in 0..c_in {
                    for dy in 0..kk {
                        for dx in 0..kk {
                            s += k.data()[((o * c_in + c) * kk + dy) * kk + dx]
                                * input.data()[(c * h + y * stride + dy) * w + x * stride + dx];
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = s;
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out).unwrap()
}

#[test]
fn conv_unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 4, 5]);
    let k = Tensor::full(&[1, 1, 1, 1], 1.0);
    assert_eq!(conv(&x, &k, &Tensor::zeros(&[1]), 1).unwrap(), x);
}

#[test]
fn conv_zero_kernel_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 6, 6]);
    let b = Tensor::vector(vec![0.5, -1.5, 2.0]).unwrap();
    let y = conv(&x, &Tensor::zeros(&[3, 2, 3, 3]), &b, 1).unwrap();
    assert_eq!(y.shape(), &[3, 4, 4]);
    for o in 0..3 {
        assert!(y.data()[o * 16..(o + 1) * 16].iter().all(|&v| v == b.data()[o]));
    }
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[1, 5, 5]);
    let k = rand_tensor(&mut rng, &[1, 1, 3, 3]);
    let b = rand_tensor(&mut rng, &[1]);
    assert!(conv(&x, &k, &b, 1).unwrap().max_abs_diff(&conv_oracle(&x, &k, &b, 1)) < 1e-12);
    // multi-channel with stride
    let x = rand_tensor(&mut rng, &[3, 9, 8]);
    let k = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    assert!(conv(&x, &k, &b, 2).unwrap().max_abs_diff(&conv_oracle(&x, &k, &b, 2)) < 1e-12);
}

#[test]
fn conv_batched_matches_per_item() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[3, 2, 7, 7]);
    let k = rand_tensor(&mut rng, &[4, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let batched = conv(&x, &k, &b, 1).unwrap();
    for n in 0..3 {
        let item = Tensor::new(vec![2, 7, 7], x.data()[n * 98..(n + 1) * 98].to_vec()).unwrap();
        let single = conv(&item, &k, &b, 1).unwrap();
        assert_eq!(&batched.data()[n * 100..(n + 1) * 100], single.data());
    }
}

#[test]
fn conv_kernel_larger_than_input() {
    let err = conv(&Tensor::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 1, 3, 3]), &Tensor::zeros(&[1]), 1);
    assert!(matches!(err, Err(Error::Dimension(_))));
}

// ---------------------------------------------------------------- maxpool

fn pool(t: Tensor, k: usize, s: usize) -> crate::Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(t);
    let y = tape.maxpool2d(x, k, s)?;
    Ok(tape.value(y).clone())
}

#[test]
fn maxpool_small() {
    let y = pool(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), 2, 2).unwrap();
    assert_eq!(y.data(), &[4.0]);
}

#[test]
fn maxpool_ties_route_to_first() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::full(&[1, 4, 4], 7.0));
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap().wrt(x).unwrap();
    let expected: Vec<f64> = (0..16)
        .map(|i| if (i / 4) % 2 == 0 && (i % 4) % 2 == 0 { 1.0 } else { 0.0 })
        .collect();
    assert_eq!(g.data(), &expected[..]);
}

#[test]
fn maxpool_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 4, 4]);
    let y = pool(x.clone(), 2, 2).unwrap();
    for oy in 0..2 {
        for ox in 0..2 {
            let mut m = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(x.data()[(oy * 2 + dy) * 4 + ox * 2 + dx]);
                }
            }
            assert_eq!(y.data()[oy * 2 + ox], m);
        }
    }
}

#[test]
fn maxpool_window_too_large() {
    assert!(matches!(pool(Tensor::zeros(&[1, 1, 3]), 2, 2), Err(Error::Dimension(_))));
}

// ---------------------------------------------------------------- dropout

#[test]
fn dropout_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[5, 5]);
    for (p, train) in [(0.0, true), (0.0, false), (0.5, false)] {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.dropout(v, p, train, &mut rng).unwrap();
        assert_eq!(tape.value(y), &x);
    }
}

#[test]
fn dropout_preserves_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::full(&[100_000], 1.0));
    let y = tape.dropout(v, 0.5, true, &mut rng).unwrap();
    let mean = tape.value(y).data().iter().sum::<f64>() / 1e5;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn dropout_rejects_bad_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.dropout(v, 1.0, true, &mut rng), Err(Error::Config(_))));
    assert!(matches!(tape.dropout(v, -0.1, false, &mut rng), Err(Error::Config(_))));
}

// ---------------------------------------------------------------- max over rows

fn max_rows(t: Tensor) -> Tensor {
    eval1(t, |tape, x| tape.max_over_rows(x).unwrap())
}

#[test]
fn max_over_rows_small() {
    assert_eq!(max_rows(Tensor::from_rows(&[[1.0, 5.0], [3.0, 2.0]]).unwrap()).data(), &[3.0, 5.0]);
    assert_eq!(max_rows(Tensor::from_rows(&[[1.0, -5.0]]).unwrap()).data(), &[1.0, -5.0]);
}

#[test]
fn max_over_rows_matches_column_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = rand_tensor(&mut rng, &[7, 4]);
    let y = max_rows(z.clone());
    for j in 0..4 {
        let m = (0..7).map(|i| z.at2(i, j)).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(y.data()[j], m);
    }
}

#[test]
fn max_over_rows_tie_goes_to_first_row() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::from_rows(&[[2.0, 1.0], [2.0, 3.0], [2.0, 3.0]]).unwrap());
    let y = tape.max_over_rows(x).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap().wrt(x).unwrap();
    assert_eq!(g.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
}

// ---------------------------------------------------------------- backward

#[test]
fn constant_loss_gives_zero_param_grads() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::full(&[2, 3], 0.7)).unwrap();
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(4.2));
    let grads = tape.backward(c).unwrap().for_params(&store);
    assert_eq!(grads[0], Tensor::zeros(&[2, 3]));
}

#[test]
fn sum_loss_gives_ones() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::full(&[2, 2, 3], -0.3)).unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let l = tape.sum(w);
    let grads = tape.backward(l).unwrap().for_params(&store);
    assert_eq!(grads[0], Tensor::full(&[2, 2, 3], 1.0));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
}

#[test]
fn repeated_param_use_accumulates() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::scalar(3.0)).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, id);
    let b = tape.param(&store, id);
    let y = tape.mul(a, b).unwrap(); // w²
    let g = tape.backward(y).unwrap().for_params(&store);
    assert_eq!(g[0].item().unwrap(), 6.0);
}

#[test]
fn backward_replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tape = Tape::new();
    let x = tape.variable(rand_tensor(&mut rng, &[4, 6]));
    let w = tape.variable(rand_tensor(&mut rng, &[6, 3]));
    let y = tape.matmul(x, w).unwrap();
    let s = tape.softmax_rows(y).unwrap();
    let t = tape.tanh(s);
    let l = tape.sum(t);
    let g1 = tape.backward(l).unwrap();
    let g2 = tape.backward(l).unwrap();
    for v in [x, w] {
        let (a, b) = (g1.wrt(v).unwrap(), g2.wrt(v).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

// ---------------------------------------------------------------- adamw

#[test]
fn adamw_zero_grad_no_decay_is_noop() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![0.3, -1.2]).unwrap()).unwrap();
    let before = store.clone();
    let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() }, &store).unwrap();
    opt.step(&mut store, &[Tensor::zeros(&[2])]).unwrap();
    assert_eq!(store, before);
}

#[test]
fn adamw_first_step_closed_form() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap()).unwrap();
    let lr = 0.01;
    let g = Tensor::vector(vec![0.5, -2.0, 1e-3]).unwrap();
    let mut opt = AdamW::new(AdamWConfig { lr, weight_decay: 0.0, ..Default::default() }, &store).unwrap();
    opt.step(&mut store, &[g.clone()]).unwrap();
    for (k, w0) in [0.3, -1.2, 2.0].iter().enumerate() {
        let gk = g.data()[k];
        let expect = w0 - lr * gk / (gk.abs() + 1e-8);
        assert!((store.value(ParamId(0)).data()[k] - expect).abs() < 1e-15);
    }
}

#[test]
fn adamw_three_steps_on_square() {
    // Hand-rolled AdamW on f(w) = w², gradient 2w.
    let (lr, b1, b2, eps, wd) = (0.1_f64, 0.9_f64, 0.999_f64, 1e-8_f64, 0.01_f64);
    let mut w = 1.0_f64;
    let (mut m, mut v) = (0.0_f64, 0.0_f64);
    let mut oracle = Vec::new();
    for t in 1..=3 {
        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w = w - lr * mh / (vh.sqrt() + eps) - lr * wd * w;
        oracle.push(w);
    }

    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::scalar(1.0)).unwrap();
    let mut opt = AdamW::new(AdamWConfig { lr, weight_decay: wd, ..Default::default() }, &store).unwrap();
    for expect in oracle {
        let mut tape = Tape::new();
        let wv = tape.param(&store, id);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap().for_params(&store);
        opt.step(&mut store, &grads).unwrap();
        assert!((store.value(id).item().unwrap() - expect).abs() < 1e-12);
    }
    assert_eq!(opt.steps_taken(), 3);
    assert!(opt.second_moment(0).iter().all(|&v| v >= 0.0));
}

#[test]
fn adamw_leaves_frozen_params_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&mut rng, &[3])).unwrap();
    let b = store.add("b", rand_tensor(&mut rng, &[2, 2])).unwrap();
    store.set_trainable(b, false);
    let frozen = store.value(b).clone();
    let mut opt = AdamW::new(AdamWConfig::default(), &store).unwrap();
    for _ in 0..25 {
        let grads = vec![rand_tensor(&mut rng, &[3]), rand_tensor(&mut rng, &[2, 2])];
        opt.step(&mut store, &grads).unwrap();
    }
    assert_ne!(store.value(a).data(), &[0.0; 3]);
    let now = store.value(b);
    assert!(now.data().iter().zip(frozen.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn adamw_shape_mismatch() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::zeros(&[2])).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), &store).unwrap();
    assert!(matches!(opt.step(&mut store, &[Tensor::zeros(&[3])]), Err(Error::Dimension(_))));
}

// ---------------------------------------------------------------- grad_check

#[test]
fn grad_check_linear_is_exact() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![0.5, -2.0, 3.0]).unwrap()).unwrap();
    let c = Tensor::matrix(3, 1, vec![1.5, 0.25, -4.0]).unwrap();
    let report = grad_check(&mut store, 1e-5, |s, tape| {
        let w = tape.param(s, id);
        let w = tape.reshape(w, &[1, 3])?;
        let cv = tape.constant(c.clone());
        let y = tape.matmul(w, cv)?;
        Ok(tape.sum(y))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
    assert_eq!(report.coordinates, 3);
}

#[test]
fn grad_check_sigmoid_at_zero() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(0.0)).unwrap();
    let report = grad_check(&mut store, 1e-5, |s, tape| {
        let x = tape.param(s, id);
        Ok(tape.sigmoid(x))
    })
    .unwrap();
    assert_eq!(report.analytic, 0.25);
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_detects_nondeterminism() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(1.0)).unwrap();
    let mut calls = 0.0;
    let err = grad_check(&mut store, 1e-5, |s, tape| {
        calls += 1.0;
        let x = tape.param(s, id);
        Ok(tape.affine(x, 1.0, calls))
    })
    .unwrap_err();
    assert!(matches!(err, Error::Determinism(_)));
}

// ---------------------------------------------------------------- checkpoint

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    store.add("a.w", rand_tensor(&mut rng, &[3, 4])).unwrap();
    let b = store.add("a.b", rand_tensor(&mut rng, &[4])).unwrap();
    store.set_trainable(b, false);
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &store, serde_json::json!({"lr": 1e-3}), 42).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let (header, back) = read_checkpoint(&bytes[..]).unwrap();
    assert_eq!(back, store);
    assert_eq!(header.seed, 42);
    assert_eq!(header.hyperparameters["lr"], 1e-3);

    bytes.pop();
    assert!(matches!(read_checkpoint(&bytes[..]), Err(Error::Format { .. })));
}

// ---------------------------------------------------------------- properties

macro_rules! assert_grad {
    ($e:expr) => {{
        let err = $e;
        prop_assert!(err < 1e-4, "max relative error {}", err);
    }};
}

fn small_shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..5, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_softmax_rows_are_distributions((n, m) in small_shape(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n, m]).map(|v| 10.0 * v);
        let y = softmax(x);
        for r in 0..n {
            let row = y.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0 || m == 1));
        }
    }

    #[test]
    fn prop_elementwise_grads((n, m) in small_shape(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n, m]);
        assert_grad!(check_op_grad(x.clone(), |t, v| t.sigmoid(v)));
        assert_grad!(check_op_grad(x.clone(), |t, v| t.tanh(v)));
        assert_grad!(check_op_grad(x.clone(), |t, v| t.softmax_rows(v).unwrap()));
        let pos = x.map(|v| v.abs() + 0.5);
        assert_grad!(check_op_grad(pos, |t, v| t.log(v).unwrap()));
        // keep relu inputs away from the kink
        let away = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        assert_grad!(check_op_grad(away, |t, v| t.relu(v)));
    }

    #[test]
    fn prop_matmul_and_broadcast_grads((n, m) in small_shape(), k in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n, k]);
        let w = rand_tensor(&mut rng, &[k, m]);
        let other = rand_tensor(&mut rng, &[m, k]);
        let row = rand_tensor(&mut rng, &[m]);
        assert_grad!(check_op_grad(x.clone(), |t, v| { let c = t.constant(w.clone()); t.matmul(v, c).unwrap() }));
        assert_grad!(check_op_grad(w.clone(), |t, v| { let c = t.constant(x.clone()); t.matmul(c, v).unwrap() }));
        assert_grad!(check_op_grad(x.clone(), |t, v| { let c = t.constant(other.clone()); t.matmul_nt(v, c).unwrap() }));
        assert_grad!(check_op_grad(other.clone(), |t, v| { let c = t.constant(x.clone()); t.matmul_nt(c, v).unwrap() }));
        assert_grad!(check_op_grad(row.clone(), |t, v| t.broadcast_row(v, n).unwrap()));
        assert_grad!(check_op_grad(w.clone(), |t, v| { let c = t.constant(row.clone()); t.add_row(v, c).unwrap() }));
        assert_grad!(check_op_grad(row.clone(), |t, v| { let c = t.constant(w.clone()); t.add_row(c, v).unwrap() }));
        assert_grad!(check_op_grad(x.clone(), |t, v| t.row_sum(v).unwrap()));
        assert_grad!(check_op_grad(x.clone(), |t, v| t.transpose(v).unwrap()));
        let col = rand_tensor(&mut rng, &[n, 1]);
        assert_grad!(check_op_grad(col, |t, v| t.broadcast_col(v, m).unwrap()));
    }

    #[test]
    fn prop_scalar_and_binary_grads((n, m) in small_shape(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n, m]);
        let y = rand_tensor(&mut rng, &[n, m]);
        let s = rand_tensor(&mut rng, &[1]);
        assert_grad!(check_op_grad(x.clone(), |t, v| { let c = t.constant(y.clone()); t.mul(v, c).unwrap() }));
        assert_grad!(check_op_grad(x.clone(), |t, v| { let c = t.constant(y.clone()); t.sub(c, v).unwrap() }));
        assert_grad!(check_op_grad(x.clone(), |t, v| { let c = t.constant(s.clone()); t.mul_scalar(v, c).unwrap() }));
        assert_grad!(check_op_grad(s.clone(), |t, v| { let c = t.constant(x.clone()); t.mul_scalar(c, v).unwrap() }));
        assert_grad!(check_op_grad(s.clone(), |t, v| { let c = t.constant(x.clone()); t.add_scalar(c, v).unwrap() }));
        assert_grad!(check_op_grad(x.clone(), |t, v| t.one_minus(v)));
    }

    #[test]
    fn prop_conv_pool_grads(c in 1usize..3, hw in 5usize..8, stride in 1usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[c, hw, hw]);
        let k = rand_tensor(&mut rng, &[2, c, 3, 3]);
        let b = rand_tensor(&mut rng, &[2]);
        assert_grad!(check_op_grad(x.clone(), |t, v| {
            let (kv, bv) = (t.constant(k.clone()), t.constant(b.clone()));
            t.conv2d(v, kv, bv, stride).unwrap()
        }));
        assert_grad!(check_op_grad(k.clone(), |t, v| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
            t.conv2d(xv, v, bv, stride).unwrap()
        }));
        assert_grad!(check_op_grad(b.clone(), |t, v| {
            let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
            t.conv2d(xv, kv, v, stride).unwrap()
        }));
        assert_grad!(check_op_grad(x.clone(), |t, v| t.maxpool2d(v, 2, 2).unwrap()));
    }

    #[test]
    fn prop_max_routing_conserves_gradient(n in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // quantise to force ties
        let x = rand_tensor(&mut rng, &[n, d]).map(|v| (v * 2.0).round());
        let up = rand_tensor(&mut rng, &[d]);
        let mut tape = Tape::new();
        let xv = tape.variable(x);
        let y = tape.max_over_rows(xv).unwrap();
        let w = tape.constant(up.clone());
        let p = tape.mul(y, w).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap().wrt(xv).unwrap();
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| g.at2(i, j)).collect();
            prop_assert_eq!(col.iter().filter(|&&v| v != 0.0).count() <= 1, true);
            prop_assert_eq!(col.iter().sum::<f64>(), up.data()[j]);
        }

        let img = rand_tensor(&mut rng, &[1, 2 * n, 2 * d]).map(|v| (v * 2.0).round());
        let mut tape = Tape::new();
        let iv = tape.variable(img);
        let pooled = tape.maxpool2d(iv, 2, 2).unwrap();
        let l = tape.sum(pooled);
        let g = tape.backward(l).unwrap().wrt(iv).unwrap();
        prop_assert_eq!(g.data().iter().sum::<f64>(), (n * d) as f64);
        prop_assert!(g.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
