use minconv::autodiff::{finite_diff_grad, max_relative_error, ParamId, Tape, Var};
use minconv::conv::Padding;
use minconv::tensor::{sigmoid, softplus};
use minconv::{Backend, Result, Scalar, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build<T> = dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>;
type Case<T> = (&'static str, Box<Build<T>>, Vec<Tensor<T>>);

/// Autodiff gradients of `build(inputs)` against central differences.
fn grad_error<T: Scalar>(build: &Build<T>, inputs: &[Tensor<T>], eps: T) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(ParamId(i), t))
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = tape.sum(out);
    let grads = tape.backward(loss).unwrap().into_vec();
    let fd = finite_diff_grad(
        |ps: &[Tensor<T>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
            let out = build(&mut t, &vs)?;
            let l = t.sum(out);
            Ok(t.value(l).data()[0])
        },
        inputs,
        eps,
    )
    .unwrap();
    max_relative_error(&grads, &fd)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weighted<T: Scalar>(t: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(Tensor::uniform(t.shape(y), -1.0, 1.0, &mut rng(seed)));
    t.mul(y, w)
}

/// Every composite op paired with inputs valid for it.
fn cases<T: Scalar>() -> Vec<Case<T>> {
    let u = |shape: &[usize], lo: f64, hi: f64, s: u64| Tensor::<T>::uniform(shape, lo, hi, &mut rng(s));
    let seq = [2, 5, 2, 3, 3];
    let h0 = [2, 2, 3, 3];
    vec![
        (
            "pointwise chain",
            Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let s = t.sigmoid(v[0])?;
                let th = t.tanh(v[1])?;
                let sp = t.softplus(v[0])?;
                let p = t.mul(s, th)?;
                let q = t.div(p, sp)?;
                let e = t.exp(q)?;
                let l = t.log(sp)?;
                let n = t.neg(l)?;
                let r = t.sub(e, n)?;
                weighted(t, r, 1)
            }),
            vec![u(&[3, 4], -3.0, 3.0, 2), u(&[3, 4], -3.0, 3.0, 3)],
        ),
        (
            "log gate",
            Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let a = t.log_gate(v[0], v[1])?;
                weighted(t, a, 4)
            }),
            vec![u(&[4, 5], -8.0, 8.0, 5), u(&[4, 5], -8.0, 8.0, 6)],
        ),
        (
            "fused lstm gates",
            Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let g = t.min_lstm_gates(v[0], v[1])?;
                weighted(t, g, 44)
            }),
            vec![u(&[4, 5], -8.0, 8.0, 45), u(&[4, 5], -8.0, 8.0, 46)],
        ),
        (
            "mse",
            Box::new(|t: &mut Tape<T>, v: &[Var]| t.mse(v[0], v[1])),
            vec![u(&[2, 3, 4], -1.0, 1.0, 7), u(&[2, 3, 4], -1.0, 1.0, 8)],
        ),
        (
            "concat narrow reshape",
            Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let n = t.narrow(c, 1, 1, 3)?;
                let r = t.reshape(n, &[6, 2])?;
                let sq = t.mul(r, r)?;
                weighted(t, sq, 9)
            }),
            vec![u(&[2, 2, 2], -1.0, 1.0, 10), u(&[2, 2, 2], -1.0, 1.0, 11)],
        ),
        (
            "conv2d periodic",
            Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], v[2], Padding::PERIODIC)?;
                weighted(t, y, 12)
            }),
            vec![u(&[2, 2, 5, 4], -1.0, 1.0, 13), u(&[3, 2, 3, 3], -1.0, 1.0, 14), u(&[3], -1.0, 1.0, 15)],
        ),
        (
            "conv2d zero-padded 5x5",
            Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], v[2], Padding::ZERO)?;
                weighted(t, y, 16)
            }),
            vec![u(&[1, 2, 4, 6], -1.0, 1.0, 17), u(&[2, 2, 5, 5], -1.0, 1.0, 18), u(&[2], -1.0, 1.0, 19)],
        ),
        (
            "conv2d latlon",
            Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], v[2], Padding::LATLON)?;
                weighted(t, y, 20)
            }),
            vec![u(&[1, 1, 4, 5], -1.0, 1.0, 21), u(&[2, 1, 3, 3], -1.0, 1.0, 22), u(&[2], -1.0, 1.0, 23)],
        ),
        (
            "group norm",
            Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let y = t.group_norm(v[0], 2, v[1], v[2], T::of(1e-5))?;
                weighted(t, y, 24)
            }),
            vec![u(&[2, 4, 3, 3], -2.0, 2.0, 25), u(&[4], 0.5, 1.5, 26), u(&[4], -0.5, 0.5, 27)],
        ),
        (
            "layer norm",
            Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let y = t.group_norm(v[0], 1, v[1], v[2], T::of(1e-5))?;
                weighted(t, y, 28)
            }),
            vec![u(&[1, 3, 2, 4], -2.0, 2.0, 29), u(&[3], 0.5, 1.5, 30), u(&[3], -0.5, 0.5, 31)],
        ),
        (
            "sequential scan",
            Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let h = t.linear_scan(v[0], v[1], v[2], Backend::Sequential)?;
                weighted(t, h, 32)
            }),
            vec![u(&seq, 0.05, 0.95, 33), u(&seq, -1.0, 1.0, 34), u(&h0, -1.0, 1.0, 35)],
        ),
        (
            "blelloch scan",
            Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let h = t.linear_scan(v[0], v[1], v[2], Backend::Blelloch)?;
                weighted(t, h, 36)
            }),
            vec![u(&seq, 0.05, 0.95, 37), u(&seq, -1.0, 1.0, 38), u(&h0, -1.0, 1.0, 39)],
        ),
        (
            "log-domain scan",
            Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let h = t.log_scan(v[0], v[1], v[2])?;
                weighted(t, h, 40)
            }),
            vec![u(&seq, -3.0, -0.05, 41), u(&seq, 0.1, 1.0, 42), u(&h0, -1.0, 1.0, 43)],
        ),
    ]
}

#[test]
fn every_op_matches_finite_differences_f64() {
    for (name, build, inputs) in cases::<f64>() {
        let e = grad_error(build.as_ref(), &inputs, 1e-4);
        assert!(e <= 1e-6, "{name}: relative error {e:e}");
    }
}

#[test]
fn every_op_matches_finite_differences_f32() {
    for (name, build, inputs) in cases::<f32>() {
        let e = grad_error(build.as_ref(), &inputs, 1e-2);
        assert!(e <= 1e-3, "{name}: relative error {e:e}");
    }
}

#[test]
fn fused_lstm_gates_agree_with_separate_log_gates() {
    let mut t = Tape::<f64>::new();
    let f = t.constant(Tensor::uniform(&[3, 7], -30.0, 30.0, &mut rng(50)));
    let i = t.constant(Tensor::uniform(&[3, 7], -30.0, 30.0, &mut rng(51)));
    let fused = t.min_lstm_gates(f, i).unwrap();
    let lf = t.log_gate(f, i).unwrap();
    let li = t.log_gate(i, f).unwrap();
    let out = t.value(fused).data().to_vec();
    let (lf, li) = (t.value(lf).data(), t.value(li).data());
    for j in 0..21 {
        assert!((out[j] - lf[j].exp()).abs() <= 1e-14);
        assert!((out[21 + j] - li[j].exp()).abs() <= 1e-14);
        assert!((out[j] + out[21 + j] - 1.0).abs() <= 1e-15);
    }
}

#[test]
fn fused_lstm_gates_sum_to_one_f32() {
    let mut t = Tape::<f32>::new();
    let f = t.constant(Tensor::uniform(&[64, 9], -80.0, 80.0, &mut rng(52)));
    let i = t.constant(Tensor::uniform(&[64, 9], -80.0, 80.0, &mut rng(53)));
    let fused = t.min_lstm_gates(f, i).unwrap();
    let out = t.value(fused).data();
    let n = out.len() / 2;
    for j in 0..n {
        assert!((out[j] + out[n + j] - 1.0).abs() <= f32::EPSILON, "{} {}", out[j], out[n + j]);
    }
}

#[test]
fn replayed_backward_is_bit_identical() {
    for (name, build, inputs) in cases::<f64>() {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.param(ParamId(i), t)).collect();
        let out = build(&mut tape, &vars).unwrap();
        let loss = tape.sum(out);
        let a = tape.backward(loss).unwrap().into_vec();
        let b = tape.backward(loss).unwrap().into_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!(
                x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()),
                "{name}"
            );
        }
    }
}

#[test]
fn softplus_tail() {
    let x = 30.0f64;
    assert!(softplus(x) - x <= 1e-12);
    assert!((softplus(-x) - (-x).exp()).abs() <= 1e-24);
}

proptest! {
    #[test]
    fn log_sigmoid_is_negative_softplus_f32(x in -30.0f32..30.0) {
        let lhs = -softplus(-x);
        let rhs = sigmoid(x).ln();
        prop_assert!((lhs - rhs).abs() <= 1e-6, "x={x}: {lhs} vs {rhs}");
    }

    #[test]
    fn softplus_bounds_relu(x in -50.0f64..50.0) {
        prop_assert!(softplus(x) >= x.max(0.0));
        prop_assert!(softplus(x) <= x.max(0.0) + std::f64::consts::LN_2 + 1e-15);
    }

    #[test]
    fn sigmoid_symmetry(x in -40.0f64..40.0) {
        prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() <= 1e-15);
    }
}
