use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_inputs, DEFAULT_STEP};
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn t2(rows: &[&[f64]]) -> Tensor {
    let n = rows[0].len();
    Tensor::new([rows.len(), n], rows.concat()).unwrap()
}

fn eval1(x: Tensor, f: impl FnOnce(&mut Graph, Var) -> Var) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v);
    g.value(out).clone()
}

#[test]
fn matmul_examples() {
    let b = t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(3));
    let bv = g.constant(b.clone());
    let out = g.matmul(i, bv).unwrap();
    assert_eq!(g.value(out), &b);

    let a = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let ones = g.constant(t2(&[&[1.0], &[1.0]]));
    let out = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([4, 5]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[5, 4]);
    let b = rand_tensor(&mut rng, &[4, 3]);
    let r = check_inputs(&[a, b], DEFAULT_STEP, |g, v| g.matmul(v[0], v[1])).unwrap();
    assert!(r.max_rel_err() < 1e-6, "{r:?}");
}

#[test]
fn softmax_examples() {
    let out = eval1(t2(&[&[0.3; 4]]), |g, v| g.softmax_rows(v).unwrap());
    assert!(out.data().iter().all(|p| (p - 0.25).abs() < 1e-15));

    let out = eval1(t2(&[&[0.0, 2f64.ln()]]), |g, v| g.softmax_rows(v).unwrap());
    assert!((out.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((out.data()[1] - 2.0 / 3.0).abs() < 1e-15);

    // e^{-1000} underflows to zero in f64, so the exact answer is one-hot to
    // well below the tolerance.
    let out = eval1(t2(&[&[0.0, 1000.0, -3.0]]), |g, v| g.softmax_rows(v).unwrap());
    assert!((out.data()[1] - 1.0).abs() < 1e-12);
    assert!(out.data()[0].abs() < 1e-12 && out.data()[2].abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e4f64..1e4, 1..40)) {
        let n = row.len();
        let out = eval1(Tensor::new([1, n], row).unwrap(), |g, v| g.softmax_rows(v).unwrap());
        let s: f64 = out.data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        prop_assert!(out.data().iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn convolutions_are_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 6, 5]);
        let y = rand_tensor(&mut rng, &[3, 6, 5]);
        let k = rand_tensor(&mut rng, &[3, 5, 5]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let combo = Tensor::from_fn([3, 6, 5], |i| a * x.data()[i] + b * y.data()[i]);
        let run = |inp: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(inp.clone());
            let kv = g.constant(k.clone());
            let wv = g.constant(w.clone());
            let zero = g.constant(Tensor::zeros([4]));
            let d = g.depthwise_conv2d(xv, kv).unwrap();
            let p = g.pointwise_conv2d(xv, wv, zero).unwrap();
            (g.value(d).clone(), g.value(p).clone())
        };
        let (dx, px) = run(&x);
        let (dy, py) = run(&y);
        let (dc, pc) = run(&combo);
        for i in 0..dc.len() {
            prop_assert!((dc.data()[i] - (a * dx.data()[i] + b * dy.data()[i])).abs() < 1e-10);
        }
        for i in 0..pc.len() {
            prop_assert!((pc.data()[i] - (a * px.data()[i] + b * py.data()[i])).abs() < 1e-10);
        }
    }
}

fn ln_default(g: &mut Graph, x: Var, d: usize, eps: f64) -> Var {
    let gain = g.constant(Tensor::full([d], 1.0));
    let bias = g.constant(Tensor::zeros([d]));
    g.layer_norm(x, gain, bias, eps).unwrap()
}

#[test]
fn layer_norm_examples() {
    let out = eval1(t2(&[&[2.5; 5]]), |g, v| ln_default(g, v, 5, 1e-5));
    assert!(out.data().iter().all(|v| *v == 0.0));
    let out = eval1(t2(&[&[1.0, 3.0]]), |g, v| ln_default(g, v, 2, 0.0));
    assert_eq!(out.data(), &[-1.0, 1.0]);
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 6]);
    let gain = rand_tensor(&mut rng, &[6]);
    let bias = rand_tensor(&mut rng, &[6]);
    let r = check_inputs(&[x, gain, bias], DEFAULT_STEP, |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    })
    .unwrap();
    assert!(r.max_rel_err() < 1e-5, "{r:?}");
}

/// Φ(1) by composite Simpson quadrature of the Gaussian density.
fn gaussian_cdf_at_one() -> f64 {
    let n = 10_000;
    let h = 1.0 / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(1.0);
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

#[test]
fn activation_examples() {
    let x = Tensor::new([3], vec![-2.0, 3.0, 0.0]).unwrap();
    let r = eval1(x.clone(), |g, v| g.relu(v));
    assert_eq!(r.data(), &[0.0, 3.0, 0.0]);
    let ge = eval1(Tensor::new([2], vec![0.0, 1.0]).unwrap(), |g, v| g.gelu(v));
    assert_eq!(ge.data()[0], 0.0);
    let oracle = gaussian_cdf_at_one();
    assert!((oracle - 0.841345).abs() < 1e-5);
    assert!((ge.data()[1] - oracle).abs() < 1e-10);
    let s = eval1(Tensor::scalar(0.0), |g, v| g.sigmoid(v));
    assert_eq!(s.item(), 0.5);
    let t = eval1(Tensor::scalar(0.5), |g, v| g.tanh(v));
    assert_eq!(t.item(), 0.5f64.tanh());
}

#[test]
fn activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[3, 7]);
    for (name, f) in [
        ("relu", Graph::relu as fn(&mut Graph, Var) -> Var),
        ("gelu", Graph::gelu),
        ("sigmoid", Graph::sigmoid),
        ("tanh", Graph::tanh),
    ] {
        let r = check_inputs(std::slice::from_ref(&x), DEFAULT_STEP, |g, v| Ok(f(g, v[0]))).unwrap();
        assert!(r.max_rel_err() < 1e-6, "{name}: {r:?}");
    }
}

fn depthwise(x: Tensor, k: Tensor) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let kv = g.constant(k);
    let out = g.depthwise_conv2d(xv, kv).unwrap();
    g.value(out).clone()
}

#[test]
fn depthwise_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 4, 5]);
    let k1 = Tensor::new([2, 1, 1], vec![2.0, -0.5]).unwrap();
    let out = depthwise(x.clone(), k1);
    for i in 0..20 {
        assert_eq!(out.data()[i], 2.0 * x.data()[i]);
        assert_eq!(out.data()[20 + i], -0.5 * x.data()[20 + i]);
    }

    let mut delta = Tensor::zeros([2, 3, 3]);
    delta.data_mut()[4] = 1.0;
    delta.data_mut()[13] = 1.0;
    assert_eq!(depthwise(x.clone(), delta), x);

    let c = 1.75;
    let out = depthwise(Tensor::full([1, 5, 5], c), Tensor::full([1, 3, 3], 1.0));
    // Direct summation over the in-bounds 3x3 neighbourhood.
    for y in 0..5usize {
        for xx in 0..5usize {
            let mut expect = 0.0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (yy, xq) = (y as i32 + dy, xx as i32 + dx);
                    if (0..5).contains(&yy) && (0..5).contains(&xq) {
                        expect += c;
                    }
                }
            }
            assert_eq!(out.data()[y * 5 + xx], expect);
        }
    }
    assert_eq!(out.data()[12], 9.0 * c);
    assert_eq!(out.data()[0], 4.0 * c);
}

#[test]
fn depthwise_rejects_even_kernels() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 4, 4]));
    let k = g.constant(Tensor::zeros([1, 2, 2]));
    assert!(g.depthwise_conv2d(x, k).is_err());
}

#[test]
fn pointwise_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 4, 4]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let eye = g.constant(Tensor::eye(3));
    let zero = g.constant(Tensor::zeros([3]));
    let out = g.pointwise_conv2d(xv, eye, zero).unwrap();
    assert_eq!(g.value(out), &x);

    // On a 1x1 grid the map is w · x.
    let w = rand_tensor(&mut rng, &[2, 3]);
    let px = rand_tensor(&mut rng, &[3, 1, 1]);
    let wv = g.constant(w.clone());
    let pv = g.constant(px.clone());
    let b0 = g.constant(Tensor::zeros([2]));
    let out = g.pointwise_conv2d(pv, wv, b0).unwrap();
    let col = g.constant(px.reshaped([3, 1]).unwrap());
    let mm = g.matmul(wv, col).unwrap();
    assert_eq!(g.value(out).data(), g.value(mm).data());
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 4, 4]);
    let w = rand_tensor(&mut rng, &[5, 3]);
    let b = rand_tensor(&mut rng, &[5]);
    let r = check_inputs(&[x.clone(), w, b], DEFAULT_STEP, |g, v| {
        g.pointwise_conv2d(v[0], v[1], v[2])
    })
    .unwrap();
    assert!(r.max_rel_err() < 1e-5, "{r:?}");

    let k = rand_tensor(&mut rng, &[3, 5, 5]);
    let r = check_inputs(&[x.clone(), k], DEFAULT_STEP, |g, v| g.depthwise_conv2d(v[0], v[1]))
        .unwrap();
    assert!(r.max_rel_err() < 1e-5, "{r:?}");

    let w4 = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let b4 = rand_tensor(&mut rng, &[2]);
    let r = check_inputs(&[x, w4, b4], DEFAULT_STEP, |g, v| g.conv2d(v[0], v[1], v[2], 2, 1))
        .unwrap();
    assert!(r.max_rel_err() < 1e-5, "{r:?}");
}

#[test]
fn drop_path_modes() {
    let x = Tensor::from_fn([4, 3], |i| i as f64 - 5.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let e = g.drop_path(v, 0.6, false, &mut rng).unwrap();
    assert_eq!(g.value(e), &x);
    let z = g.drop_path(v, 0.0, true, &mut rng).unwrap();
    assert_eq!(g.value(z), &x);
    assert!(g.drop_path(v, 1.0, true, &mut rng).is_err());
}

#[test]
fn drop_path_keep_rate_monte_carlo() {
    let x = Tensor::new([2], vec![0.7, -1.4]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 100_000;
    let mut kept = 0usize;
    for _ in 0..trials {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let o = g.drop_path(v, 0.3, true, &mut rng).unwrap();
        let out = g.value(o).data();
        if out[0] != 0.0 {
            kept += 1;
            assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] + 2.0).abs() < 1e-12);
        } else {
            assert_eq!(out[1], 0.0);
        }
    }
    let rate = kept as f64 / trials as f64;
    assert!((rate - 0.7).abs() < 0.01, "keep rate {rate}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new([3], vec![1.0, -4.0, 2.0]).unwrap(), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);

    assert!(g.backward(sq).is_err());
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut store = ParamStore::new();
    let id = store
        .register("w", Tensor::new([2], vec![1.0, 2.0]).unwrap())
        .unwrap();
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    g.backward_params(loss, &mut store).unwrap();
    g.backward_params(loss, &mut store).unwrap();
    assert_eq!(store.get(id).grad, vec![4.0, 8.0]);
    store.zero_grads();
    assert_eq!(store.get(id).grad, vec![0.0, 0.0]);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[4, 9, 7]);
    let k = rand_tensor(&mut rng, &[4, 7, 7]);
    let w = rand_tensor(&mut rng, &[16, 4]);
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let wv = g.constant(w.clone());
        let b = g.constant(Tensor::zeros([16]));
        let d = g.depthwise_conv2d(xv, kv).unwrap();
        let p = g.pointwise_conv2d(d, wv, b).unwrap();
        let a = g.gelu(p);
        g.value(a).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
