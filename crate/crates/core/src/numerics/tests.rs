use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    Array::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn conv_output_size_formula() {
    let mut ps = ParamSet::<f64>::new();
    let w = ps.add("w", Array::full(&[3, 1, 8, 8], 0.1));
    let b = ps.add("b", Array::zeros(&[3]));
    let mut t = Tape::new(&ps);
    let x = t.constant(Array::full(&[1, 1, 8, 8], 1.0));
    let (wv, bv) = (t.param(w), t.param(b));
    let y = t.conv2d(x, wv, bv, 4, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 1, 1]);

    for (h, k, s, p) in [(36, 8, 4, 0), (8, 4, 2, 0), (16, 8, 4, 10), (5, 3, 1, 1), (9, 3, 2, 1)] {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", Array::zeros(&[2, 1, k, k]));
        let b = ps.add("b", Array::zeros(&[2]));
        let mut t = Tape::new(&ps);
        let x = t.constant(Array::zeros(&[1, 1, h, h + 1]));
        let (wv, bv) = (t.param(w), t.param(b));
        let y = t.conv2d(x, wv, bv, s, p).unwrap();
        assert_eq!(t.shape(y)[2], (h + 2 * p - k) / s + 1);
        assert_eq!(t.shape(y)[3], (h + 1 + 2 * p - k) / s + 1);
    }
}

#[test]
fn conv_identity_kernel_and_cross_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = rand_array(&mut rng, &[2, 1, 5, 4]);
    let mut ps = ParamSet::<f64>::new();
    let w = ps.add("w", Array::full(&[1, 1, 1, 1], 1.0));
    let b = ps.add("b", Array::zeros(&[1]));
    let mut t = Tape::new(&ps);
    let x = t.constant(input.clone());
    let (wv, bv) = (t.param(w), t.param(b));
    let y = t.conv2d(x, wv, bv, 1, 0).unwrap();
    assert_eq!(t.value(y), &input);

    // Asymmetric kernel: output[0,0] = sum_{ky,kx} w[ky,kx] * x[ky,kx] without flipping.
    let mut ps = ParamSet::<f64>::new();
    let w = ps.add("w", Array::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = ps.add("b", Array::zeros(&[1]));
    let mut t = Tape::new(&ps);
    let x = t.constant(Array::new(&[1, 1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap());
    let (wv, bv) = (t.param(w), t.param(b));
    let y = t.conv2d(x, wv, bv, 1, 0).unwrap();
    assert_eq!(t.value(y).item(), 10.0 + 40.0 + 90.0 + 160.0);
}

#[test]
fn conv_rejects_bad_shapes_naming_the_dimension() {
    let mut ps = ParamSet::<f64>::new();
    let w = ps.add("w", Array::zeros(&[2, 3, 4, 4]));
    let b = ps.add("b", Array::zeros(&[2]));
    let mut t = Tape::new(&ps);
    let x = t.constant(Array::zeros(&[1, 2, 8, 8]));
    let (wv, bv) = (t.param(w), t.param(b));
    let err = t.conv2d(x, wv, bv, 1, 0).unwrap_err().to_string();
    assert!(err.contains("input channels"), "{err}");
    let x = t.constant(Array::zeros(&[1, 3, 3, 8]));
    let err = t.conv2d(x, wv, bv, 1, 0).unwrap_err().to_string();
    assert!(err.contains("height"), "{err}");
    let x = t.constant(Array::zeros(&[1, 3, 8, 2]));
    let err = t.conv2d(x, wv, bv, 1, 0).unwrap_err().to_string();
    assert!(err.contains("width"), "{err}");
    let x = t.constant(Array::zeros(&[1, 3, 8, 8]));
    assert!(t.conv2d(x, wv, bv, 0, 0).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamSet::<f64>::new();
    let x = ps.add("x", rand_array(&mut rng, &[2, 3, 9, 9]));
    let w = ps.add("w", rand_array(&mut rng, &[4, 3, 3, 3]));
    let b = ps.add("b", rand_array(&mut rng, &[4]));
    let probe = rand_array(&mut rng, &[2, 4, 7, 7]);
    let report = check_param_gradients(&mut ps, 1e-5, 10_000, 0, |t| {
        let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
        let y = t.conv2d(xv, wv, bv, 1, 0)?;
        let p = t.constant(probe.clone());
        let yp = t.mul(y, p)?;
        Ok(t.sum(yp))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");

    // strided + padded variant
    let mut ps = ParamSet::<f64>::new();
    let x = ps.add("x", rand_array(&mut rng, &[1, 2, 10, 7]));
    let w = ps.add("w", rand_array(&mut rng, &[3, 2, 4, 4]));
    let b = ps.add("b", rand_array(&mut rng, &[3]));
    let report = check_param_gradients(&mut ps, 1e-5, 10_000, 0, |t| {
        let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
        let y = t.conv2d(xv, wv, bv, 2, 2)?;
        let y2 = t.mul(y, y)?;
        Ok(t.sum(y2))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn linear_identity_zero_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = rand_array(&mut rng, &[4, 3]);
    let mut eye = Array::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let mut ps = ParamSet::<f64>::new();
    let w = ps.add("w", eye);
    let b = ps.add("b", Array::zeros(&[3]));
    let w0 = ps.add("w0", Array::zeros(&[2, 3]));
    let bc = ps.add("bc", Array::full(&[2], 2.5));
    let mut t = Tape::new(&ps);
    let x = t.constant(input.clone());
    let (wv, bv) = (t.param(w), t.param(b));
    let y = t.linear(x, wv, bv).unwrap();
    assert_eq!(t.value(y), &input);
    let (wv, bv) = (t.param(w0), t.param(bc));
    let y = t.linear(x, wv, bv).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 2.5));
    let bad = t.constant(Array::zeros(&[4, 5]));
    assert!(t.linear(bad, wv, bv).is_err());

    let mut ps = ParamSet::<f64>::new();
    let x = ps.add("x", rand_array(&mut rng, &[4, 10]));
    let w = ps.add("w", rand_array(&mut rng, &[5, 10]));
    let b = ps.add("b", rand_array(&mut rng, &[5]));
    let report = check_param_gradients(&mut ps, 1e-5, 10_000, 0, |t| {
        let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
        let y = t.linear(xv, wv, bv)?;
        let y = t.tanh(y);
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn elementwise_definitions() {
    let ps = ParamSet::<f64>::new();
    let mut t = Tape::new(&ps);
    let z = t.constant(Array::scalar(0.0));
    let s = t.sigmoid(z);
    assert_eq!(t.value(s).item(), 0.5);
    let x = t.constant(Array::new(&[3], vec![-1.5, 0.0, 2.0]).unwrap());
    let d = t.sub(x, x).unwrap();
    let a = t.abs(d);
    assert!(t.value(a).data().iter().all(|&v| v == 0.0));
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    let big = t.constant(Array::new(&[2], vec![-30.0, 30.0]).unwrap());
    let sb = t.sigmoid(big);
    assert!(t.value(sb).data().iter().all(|&v| v > 0.0 && v < 1.0));

    let p = t.constant(Array::zeros(&[2, 3, 4, 5]));
    let q = t.constant(Array::zeros(&[2, 3, 4, 5]));
    let c = t.concat(&[p, q], 1).unwrap();
    assert_eq!(t.shape(c), &[2, 6, 4, 5]);
    let wrong = t.constant(Array::zeros(&[2, 3, 4, 6]));
    assert!(t.concat(&[p, wrong], 1).is_err());
    assert!(t.add(p, wrong).is_err());
    assert!(t.mul(p, wrong).is_err());

    let oh = one_hot::<f64>(&[2, 0], 4).unwrap();
    assert_eq!(oh.data(), &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    assert!(one_hot::<f64>(&[4], 4).is_err());
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = ParamSet::<f64>::new();
    let a = ps.add("a", rand_array(&mut rng, &[2, 3, 2]));
    let b = ps.add("b", rand_array(&mut rng, &[2, 3, 2]));
    let report = check_param_gradients(&mut ps, 1e-5, 10_000, 0, |t| {
        let (av, bv) = (t.param(a), t.param(b));
        let d = t.sub(av, bv)?;
        let ad = t.abs(d);
        let s = t.sigmoid(av);
        let one_minus = t.affine(s, -1.0, 1.0);
        let m = t.mul(ad, one_minus)?;
        let r = t.relu(bv);
        let c = t.concat(&[m, r], 1)?;
        let f = t.flatten(c)?;
        let sel = t.select_rows(f, &[1, 0, 1])?;
        let sc = t.row_scale(sel, &[0.5, 1.0, -2.0])?;
        let th = t.tanh(sc);
        let s1 = t.sum(th);
        let s2 = t.mean(m);
        t.weighted_sum(&[(s1, 1.0), (s2, 3.0)])
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

fn gru_params(ps: &mut ParamSet<f64>, rng: &mut ChaCha8Rng, n: usize, m: usize) -> [ParamId; 4] {
    [
        ps.add("wx", rand_array(rng, &[3 * m, n])),
        ps.add("bx", rand_array(rng, &[3 * m])),
        ps.add("wh", rand_array(rng, &[3 * m, m])),
        ps.add("bh", rand_array(rng, &[3 * m])),
    ]
}

#[test]
fn gru_zero_case_and_range() {
    let mut ps = ParamSet::<f64>::new();
    let wx = ps.add("wx", Array::zeros(&[6, 3]));
    let bx = ps.add("bx", Array::zeros(&[6]));
    let wh = ps.add("wh", Array::zeros(&[6, 2]));
    let bh = ps.add("bh", Array::zeros(&[6]));
    let mut t = Tape::new(&ps);
    let x = t.constant(Array::zeros(&[2, 3]));
    let h = t.constant(Array::zeros(&[2, 2]));
    let (a, b, c, d) = (t.param(wx), t.param(bx), t.param(wh), t.param(bh));
    let gx = t.linear(x, a, b).unwrap();
    let out = t.gru_step(gx, h, c, d).unwrap();
    assert!(t.value(out).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let mut ps = ParamSet::<f64>::new();
        let [wx, bx, wh, bh] = gru_params(&mut ps, &mut rng, 4, 3);
        let mut t = Tape::new(&ps);
        let x = t.constant(rand_array(&mut rng, &[5, 4]).map(|v| 5.0 * v));
        let h = t.constant(rand_array(&mut rng, &[5, 3]).map(|v| 0.999 * v));
        let (a, b, c, d) = (t.param(wx), t.param(bx), t.param(wh), t.param(bh));
        let gx = t.linear(x, a, b).unwrap();
        let out = t.gru_step(gx, h, c, d).unwrap();
        assert!(t.value(out).data().iter().all(|&v| v > -1.0 && v < 1.0));
        let bad = t.constant(Array::zeros(&[5, 4]));
        assert!(t.gru_step(gx, bad, c, d).is_err());
    }
}

#[test]
fn gru_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ps = ParamSet::<f64>::new();
    let [wx, bx, wh, bh] = gru_params(&mut ps, &mut rng, 4, 3);
    let x = ps.add("x", rand_array(&mut rng, &[2, 4]));
    let h0 = ps.add("h0", rand_array(&mut rng, &[2, 3]).map(|v| 0.9 * v));
    let probe = rand_array(&mut rng, &[2, 3]);
    let report = check_param_gradients(&mut ps, 1e-5, 10_000, 0, |t| {
        let (a, b, c, d) = (t.param(wx), t.param(bx), t.param(wh), t.param(bh));
        let (xv, hv) = (t.param(x), t.param(h0));
        let gx = t.linear(xv, a, b)?;
        let h1 = t.gru_step(gx, hv, c, d)?;
        let h2 = t.gru_step(gx, h1, c, d)?;
        let p = t.constant(probe.clone());
        let y = t.mul(h2, p)?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

/// Direct evaluation of `-log(exp(x_t) / sum_j exp(x_j))` without max-subtraction.
fn ce_oracle(logits: &[f64], n: usize, targets: &[usize]) -> f64 {
    let rows = targets.len();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits[i * n..(i + 1) * n];
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[t].exp() / denom).ln();
    }
    total / rows as f64
}

#[test]
fn cross_entropy_values() {
    let ps = ParamSet::<f64>::new();
    let mut t = Tape::new(&ps);
    let u = t.constant(Array::full(&[3, 4], 0.7));
    let l = t.cross_entropy(u, &[0, 3, 1]).unwrap();
    assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let mut sat = Array::zeros(&[2, 4]);
    sat.data_mut()[2] = 1e4;
    sat.data_mut()[4 + 1] = 1e4;
    let s = t.constant(sat);
    let l = t.cross_entropy(s, &[2, 1]).unwrap();
    assert!(t.value(l).item() <= 1e-6);
    assert!(matches!(t.cross_entropy(s, &[2, 4]), Err(Error::Invalid(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let logits = rand_array(&mut rng, &[8, 5]).map(|v| 3.0 * v);
        let targets: Vec<usize> = (0..8).map(|_| rng.random_range(0..5)).collect();
        let x = t.constant(logits.clone());
        let l = t.cross_entropy(x, &targets).unwrap();
        let v = t.value(l).item();
        assert!(v >= 0.0);
        assert!((v - ce_oracle(logits.data(), 5, &targets)).abs() <= 1e-10);
    }
}

#[test]
fn loss_heads_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamSet::<f64>::new();
    let logits = ps.add("logits", rand_array(&mut rng, &[6, 4]));
    let values = ps.add("values", rand_array(&mut rng, &[6]));
    let actions: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
    let old: Vec<f64> = (0..6).map(|_| rng.random_range(-2.5..-0.5)).collect();
    let adv: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ret: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let report = check_param_gradients(&mut ps, 1e-5, 10_000, 0, |t| {
        let (l, v) = (t.param(logits), t.param(values));
        let pg = t.clipped_surrogate(l, &actions, &old, &adv, 0.2)?;
        let vl = t.mse(v, &ret)?;
        let ent = t.entropy(l)?;
        let ce = t.cross_entropy(l, &actions)?;
        t.weighted_sum(&[(pg, 1.0), (vl, 0.5), (ent, -0.01), (ce, 0.1)])
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn entropy_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ps = ParamSet::<f64>::new();
    let mut t = Tape::new(&ps);
    for _ in 0..50 {
        let x = t.constant(rand_array(&mut rng, &[3, 4]).map(|v| 10.0 * v));
        let e = t.entropy(x).unwrap();
        let h = t.value(e).item();
        assert!(h >= 0.0 && h <= 4f64.ln() + 1e-12);
    }
}

#[test]
fn backward_sum_constant_and_reuse() {
    let mut ps = ParamSet::<f64>::new();
    let p = ps.add("p", Array::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let q = ps.add("q", Array::full(&[3], 4.0));
    let mut t = Tape::new(&ps);
    let pv = t.param(p);
    let s = t.sum(pv);
    let g = t.backward(s).unwrap();
    assert!(g.param(p).data().iter().all(|&v| v == 1.0));
    assert!(g.param(q).data().iter().all(|&v| v == 0.0));
    assert!(matches!(t.backward(s), Err(Error::BackwardReused)));
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let mut ps = ParamSet::<f64>::new();
    let p = ps.add("p", Array::new(&[2], vec![1.5, -0.5]).unwrap());
    let mut t = Tape::new(&ps);
    let a = t.param(p);
    let b = t.param(p);
    assert_eq!(a, b);
    let m = t.mul(a, b).unwrap();
    let s = t.sum(m);
    let g = t.backward(s).unwrap();
    assert_eq!(g.param(p).data(), &[3.0, -1.0]);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamSet::<f32>::new();
    let w = ps.add("w", rand_array(&mut rng, &[8, 1, 4, 4]).cast());
    let b = ps.add("b", Array::zeros(&[8]));
    let input: Array<f32> = rand_array(&mut rng, &[3, 1, 12, 12]).cast();
    let run = || {
        let mut t = Tape::new(&ps);
        let x = t.constant(input.clone());
        let (wv, bv) = (t.param(w), t.param(b));
        let y = t.conv2d(x, wv, bv, 2, 0).unwrap();
        t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
