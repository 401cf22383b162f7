use frs_autograd::{Tape, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

/// Central differences of the scalar `f` w.r.t. every entry of `x`.
fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += H;
            let mut minus = x.clone();
            minus.data_mut()[i] -= H;
            (f(&plus) - f(&minus)) / (2.0 * H)
        })
        .collect()
}

fn lcg(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            lo + (hi - lo) * ((s >> 11) as f64 / (1u64 << 53) as f64)
        })
        .collect()
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn conv_identity_kernel() {
    let x = t(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(xv, w, b, 1, 0).unwrap();
    assert!(tape.value(y).bit_eq(&x));
}

#[test]
fn conv_constant_field() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv_rejects_bad_channels_naming_the_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let err = tape.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
    assert!(err.contains("Cin") || err.contains("channel"), "{err}");
}

#[test]
fn conv_weight_gradient_matches_finite_differences() {
    let x = t(&[1, 2, 4, 4], lcg(1, 32, -2.0, 2.0));
    let w = t(&[3, 2, 3, 3], lcg(2, 54, -2.0, 2.0));
    let bias = t(&[3], lcg(3, 3, -1.0, 1.0));
    let proj = t(&[1, 3, 4, 4], lcg(4, 48, -1.0, 1.0));
    let loss = |w: &Tensor| {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
        tape.value(y).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.leaf(w.clone()), tape.constant(bias.clone()));
    let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
    let l = tape.weighted_sum(y, proj.clone()).unwrap();
    tape.backward(l).unwrap();
    let analytic = tape.grad(wv).unwrap();
    for (a, n) in analytic.data().iter().zip(numeric_grad(&w, loss)) {
        assert!(rel_err(*a, n) < 1e-6, "analytic {a} numeric {n}");
    }
}

#[test]
fn sigmoid_values_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], vec![0.0, 1.0]));
    let y = tape.sigmoid(x);
    assert_eq!(tape.value(y).data()[0], 0.5);
    let s1 = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((tape.value(y).data()[1] - 0.7310586).abs() < 1e-7);
    assert!((tape.value(y).data()[1] - s1).abs() < 1e-15);
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    let g = tape.grad(x).unwrap().data()[1];
    let numeric = (1.0 / (1.0 + (-(1.0 + H)).exp()) - 1.0 / (1.0 + (-(1.0 - H)).exp())) / (2.0 * H);
    assert!((g - 0.1966119).abs() < 1e-7);
    assert!(rel_err(g, numeric) < 1e-6);
}

#[test]
fn max_over_channels_examples() {
    let mut tape = Tape::new();
    let single = t(&[1, 1, 2, 2], vec![0.3, -1.0, 2.0, 0.0]);
    let x = tape.constant(single.clone());
    let y = tape.max_over_channels(x).unwrap();
    assert!(tape.value(y).bit_eq(&single));

    let x = tape.constant(t(&[1, 3, 1, 1], vec![0.2, 0.9, 0.4]));
    let y = tape.max_over_channels(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.9]);

    let data = lcg(7, 36, -2.0, 2.0);
    let x = tape.constant(t(&[1, 4, 3, 3], data.clone()));
    let y = tape.max_over_channels(x).unwrap();
    for site in 0..9 {
        let mut best = f64::NEG_INFINITY;
        for c in 0..4 {
            best = best.max(data[c * 9 + site]);
        }
        assert_eq!(tape.value(y).data()[site], best);
    }
}

#[test]
fn max_backward_goes_to_first_argmax() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 3, 1, 1], vec![0.5, 0.7, 0.7]));
    let y = tape.max_over_channels(x).unwrap();
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn upsample_examples_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 3.0));
    let y = tape.upsample_nearest2x(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == 3.0));

    let x0 = t(&[1, 2, 2, 3], lcg(9, 12, -2.0, 2.0));
    let proj = t(&[1, 2, 4, 6], lcg(10, 48, -1.0, 1.0));
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let y = tape.upsample_nearest2x(x).unwrap();
    assert!((tape.value(y).sum() - 4.0 * x0.sum()).abs() < 1e-12);
    let l = tape.weighted_sum(y, proj.clone()).unwrap();
    tape.backward(l).unwrap();
    let numeric = numeric_grad(&x0, |x| {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.upsample_nearest2x(v).unwrap();
        tape.value(y).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    });
    for (a, n) in tape.grad(x).unwrap().data().iter().zip(numeric) {
        assert!(rel_err(*a, n) < 1e-6);
    }
}

#[test]
fn bce_and_mse_examples() {
    let mut tape = Tape::new();
    let p = tape.constant(t(&[2], vec![1.0, 0.5]));
    let q = tape.constant(t(&[2], vec![1.0, 0.5]));
    let b = tape.bce_prob(p, q).unwrap();
    let v = tape.value(b).data().to_vec();
    assert!(v[0] >= 0.0 && v[0] <= 2e-7);
    assert!((v[1] - std::f64::consts::LN_2).abs() < 1e-6);
    let m = tape.mse_elementwise(p, p).unwrap();
    assert!(tape.value(m).data().iter().all(|&v| v == 0.0));
}

#[test]
fn bce_target_gets_no_gradient() {
    let mut tape = Tape::new();
    let p = tape.leaf(t(&[3], vec![0.2, 0.5, 0.9]));
    let q = tape.leaf(t(&[3], vec![0.1, 0.6, 0.3]));
    let b = tape.bce_prob(p, q).unwrap();
    let l = tape.sum(b);
    tape.backward(l).unwrap();
    assert!(tape.grad(p).is_some());
    assert!(tape.grad(q).map_or(true, |g| g.data().iter().all(|&v| v == 0.0)));
}

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #[test]
    fn max_ignores_permutations_of_non_argmax_channels(data in finite_vec(5 * 4), perm in Just((1..5).collect::<Vec<usize>>()).prop_shuffle()) {
        // put the largest value in channel 0, then shuffle the rest
        let mut x = data.clone();
        for s in 0..4 {
            let (mut best, mut arg) = (x[s], 0);
            for c in 1..5 {
                if x[c * 4 + s] > best {
                    best = x[c * 4 + s];
                    arg = c;
                }
            }
            x.swap(s, arg * 4 + s);
        }
        let mut y = x.clone();
        for (dst, &src) in (1..5).zip(&perm) {
            for s in 0..4 {
                y[dst * 4 + s] = x[src * 4 + s];
            }
        }
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 5, 2, 2], x));
        let b = tape.constant(t(&[1, 5, 2, 2], y));
        let ma = tape.max_over_channels(a).unwrap();
        let mb = tape.max_over_channels(b).unwrap();
        prop_assert!(tape.value(ma).bit_eq(tape.value(mb)));
    }

    #[test]
    fn forward_ops_stay_finite(data in finite_vec(2 * 3 * 4 * 4), other in finite_vec(2 * 3 * 4 * 4)) {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3, 4, 4], data));
        let y = tape.constant(t(&[2, 3, 4, 4], other));
        let w = tape.constant(Tensor::full(&[2, 3, 3, 3], 0.3));
        let b = tape.constant(Tensor::zeros(&[2]));
        let s = tape.sigmoid(y);
        let mut outs: Vec<Var> = vec![
            tape.conv2d(x, w, b, 2, 1).unwrap(),
            tape.relu(x),
            s,
            tape.exp(x),
            tape.abs(x),
            tape.mul_scalar(x, -3.5),
            tape.add(x, y).unwrap(),
            tape.sub(x, y).unwrap(),
            tape.mul(x, y).unwrap(),
            tape.mse_elementwise(x, y).unwrap(),
            tape.max_over_channels(x).unwrap(),
            tape.upsample_nearest2x(x).unwrap(),
        ];
        let p = tape.sigmoid(x);
        outs.push(tape.bce_prob(p, s).unwrap());
        outs.push(tape.sum(x));
        for v in outs {
            prop_assert!(tape.value(v).is_finite());
        }
    }

    #[test]
    fn fan_out_gradient_is_sum_of_branches(data in finite_vec(2 * 2 * 3 * 3)) {
        let x0 = t(&[2, 2, 3, 3], data);
        // both branches on one tape
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let f = tape.sigmoid(x);
        let f = tape.sum(f);
        let g = tape.mse_elementwise(x, x).unwrap();
        let g2 = tape.relu(x);
        let g = tape.add(g, g2).unwrap();
        let g = tape.sum(g);
        let l = tape.add(f, g).unwrap();
        tape.backward(l).unwrap();
        let joint = tape.grad(x).unwrap();

        // each branch alone
        let mut t1 = Tape::new();
        let x1 = t1.leaf(x0.clone());
        let f = t1.sigmoid(x1);
        let f = t1.sum(f);
        t1.backward(f).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.leaf(x0.clone());
        let g = t2.mse_elementwise(x2, x2).unwrap();
        let g2 = t2.relu(x2);
        let g = t2.add(g, g2).unwrap();
        let g = t2.sum(g);
        t2.backward(g).unwrap();
        let g1 = t1.grad(x1).unwrap();
        let g2 = t2.grad(x2).unwrap();
        for ((j, a), b) in joint.data().iter().zip(g1.data()).zip(g2.data()) {
            prop_assert!((j - (a + b)).abs() <= 1e-12 * (1.0 + j.abs()));
        }
    }

    #[test]
    fn upsample_sum_is_four_times_input(data in finite_vec(1 * 2 * 3 * 3)) {
        let x0 = t(&[1, 2, 3, 3], data);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = tape.upsample_nearest2x(x).unwrap();
        prop_assert!((tape.value(y).sum() - 4.0 * x0.sum()).abs() < 1e-12);
    }
}
