use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gradcheck::{central_difference, max_relative_error};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Max relative error between the tape gradient and central differences for
/// every input of `build`. Non-scalar outputs are contracted against fixed
/// random weights so the whole Jacobian is exercised.
fn check_op(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let scalarize = |tape: &mut Tape, out: Var, w: &Option<Tensor>| -> Var {
        match w {
            None => out,
            Some(w) => {
                let wv = tape.constant(w);
                let prod = tape.mul(out, wv).unwrap();
                tape.sum(prod)
            }
        }
    };
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x)).collect();
        let out = build(&mut tape, &vars).unwrap();
        let shape = tape.shape(out).to_vec();
        if tape.value(out).numel() == 1 {
            None
        } else {
            Some(random(&shape, &mut rng, -1.0, 1.0))
        }
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let root = scalarize(&mut tape, out, &weights);
    tape.backward(root).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).unwrap().to_vec();
        let numeric = central_difference(input.data(), 1e-5, |probe| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| {
                    if j == i {
                        tape.constant(&Tensor::new(x.shape(), probe.to_vec()).unwrap())
                    } else {
                        tape.constant(x)
                    }
                })
                .collect();
            let out = build(&mut tape, &vars).unwrap();
            let root = scalarize(&mut tape, out, &weights);
            tape.value(root).item()
        });
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

#[test]
fn matmul_identity_and_projector() {
    let mut tape = Tape::new();
    let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);

    let p = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let b = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let y = tape.matmul(p, b).unwrap();
    assert_eq!(tape.data(y), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng, -2.0, 2.0);
    let b = random(&[4, 2], &mut rng, -2.0, 2.0);
    let err = check_op(&[a, b], |tape, v| {
        let y = tape.matmul(v[0], v[1])?;
        Ok(tape.sum(y))
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[3, 4]));
    let b = tape.leaf(Tensor::zeros(&[3, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[4], &[0.0; 4]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.data(y), &[0.25; 4]);

    let x = tape.leaf(t(&[2], &[1000.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert!((tape.data(y)[0] - 1.0).abs() < 1e-12);
    assert!(tape.data(y)[1].abs() < 1e-12);

    let x = tape.leaf(t(&[2], &[f64::NAN, 0.0]));
    assert!(matches!(tape.softmax(x), Err(Error::Numeric { .. })));
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let x = t(&[3], &[1.0, 2.0, 3.0]);
    // Each output coordinate separately: full Jacobian, row by row.
    for out_idx in 0..3 {
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let y = tape.softmax(v).unwrap();
        let mut sel = Tensor::zeros(&[3]);
        sel.data_mut()[out_idx] = 1.0;
        let s = tape.constant(&sel);
        let picked = tape.mul(y, s).unwrap();
        let root = tape.sum(picked);
        tape.backward(root).unwrap();
        let analytic = tape.grad(v).unwrap().to_vec();
        let numeric = central_difference(x.data(), 1e-5, |p| {
            let mut out = [0.0; 3];
            let max = p.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = p.iter().map(|v| (v - max).exp()).sum();
            for (o, v) in out.iter_mut().zip(p) {
                *o = (v - max).exp() / z;
            }
            out[out_idx]
        });
        assert!(max_relative_error(&analytic, &numeric) < 1e-6);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(&[3, 8]));
    let loss = tape.cross_entropy(logits, &[0, 5, 7]).unwrap();
    assert!((tape.value(loss).item() - 8f64.ln()).abs() < 1e-12);

    let mut conf = Tensor::zeros(&[1, 8]);
    conf.data_mut()[2] = 30.0;
    let logits = tape.leaf(conf);
    let loss = tape.cross_entropy(logits, &[2]).unwrap();
    assert!(tape.value(loss).item() < 1e-9);

    let logits = tape.leaf(Tensor::zeros(&[2, 4]));
    assert!(matches!(
        tape.cross_entropy(logits, &[1, 4]),
        Err(Error::Index { index: 4, bound: 4, .. })
    ));
}

#[test]
fn cross_entropy_equals_indicator_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, k) = (4, 5);
    let logits = random(&[n, k], &mut rng, -2.0, 2.0);
    let targets = [3, 0, 4, 1];
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(l, &targets).unwrap();

    // -(1/N) sum_t sum_v 1{x_t = v} log P(v), with P from a plain exp/sum.
    let mut total = 0.0;
    for (r, &target) in targets.iter().enumerate() {
        let row = &logits.data()[r * k..][..k];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for v in 0..k {
            let indicator = if v == target { 1.0 } else { 0.0 };
            total -= indicator * (row[v].exp() / z).ln();
        }
    }
    assert!((tape.value(loss).item() - total / n as f64).abs() < 1e-10);
}

#[test]
fn masked_cross_entropy_averages_unmasked_rows() {
    let mut tape = Tape::new();
    let logits = tape.leaf(t(&[2, 2], &[0.0, 0.0, 5.0, -5.0]));
    let loss = tape.cross_entropy_masked(logits, &[Some(1), None]).unwrap();
    assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-12);
    let logits = tape.leaf(Tensor::zeros(&[1, 2]));
    assert!(matches!(tape.cross_entropy_masked(logits, &[None]), Err(Error::Contract(_))));
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 4], &[3.0; 4]));
    let g = tape.leaf(Tensor::full(&[4], 1.0));
    let b = tape.leaf(Tensor::zeros(&[4]));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.data(y).iter().all(|v| *v == 0.0));
}

#[test]
fn gelu_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1]));
    let y = tape.gelu(x);
    assert_eq!(tape.data(y), &[0.0]);
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut r = |shape: &[usize]| random(shape, &mut rng, -2.0, 2.0);
    let (a, b, bias) = (r(&[3, 4]), r(&[3, 4]), r(&[4]));
    let (gamma, beta) = (r(&[4]), r(&[4]));
    let table = r(&[5, 4]);
    let qkv = r(&[2 * 3, 3 * 4]);
    let tol = 1e-5;

    let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_bias", vec![a.clone(), bias.clone()], Box::new(|t, v| t.add_bias(v[0], v[1]))),
        ("affine", vec![a.clone()], Box::new(|t, v| Ok(t.affine(v[0], -1.5, 0.25)))),
        ("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]))),
        ("gelu", vec![a.clone()], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("relu", vec![a.clone()], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("leaky_relu", vec![a.clone()], Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.2)))),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("clamp", vec![a.clone()], Box::new(|t, v| Ok(t.clamp(v[0], -0.9, 1.1)))),
        ("softmax", vec![a.clone()], Box::new(|t, v| t.softmax(v[0]))),
        ("layer_norm", vec![a.clone(), gamma, beta], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2]))),
        ("cross_entropy", vec![a.clone()], Box::new(|t, v| t.cross_entropy(v[0], &[3, 0, 2]))),
        (
            "cross_entropy_masked",
            vec![a.clone()],
            Box::new(|t, v| t.cross_entropy_masked(v[0], &[Some(1), None, Some(3)])),
        ),
        ("embedding", vec![table], Box::new(|t, v| t.embedding(v[0], &[4, 0, 4, 2]))),
        ("reshape", vec![a.clone()], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("concat", vec![a.clone(), b.clone()], Box::new(|t, v| t.concat_rows(&[v[0], v[1], v[0]]))),
        ("sum", vec![a.clone()], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![a.clone()], Box::new(|t, v| Ok(t.mean(v[0])))),
        ("attention", vec![qkv], Box::new(|t, v| t.causal_attention(v[0], 2, 3, 2))),
    ];
    for (name, inputs, build) in cases {
        let err = check_op(&inputs, build);
        assert!(err < tol, "{name}: rel err {err}");
    }

    let pos = random(&[3, 4], &mut ChaCha8Rng::seed_from_u64(5), 0.5, 2.0);
    let err = check_op(&[pos], |t, v| t.ln(v[0]));
    assert!(err < tol, "ln: rel err {err}");
}

#[test]
fn dropout_gradient_uses_the_same_mask() {
    let x = Tensor::from_fn(&[10], |i| i as f64 - 4.5);
    let err = check_op(&[x], |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        t.dropout(v[0], 0.3, &mut rng)
    });
    assert!(err < 1e-5);
}

#[test]
fn straight_through_passes_the_soft_gradient() {
    let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.7);
    let w = Tensor::from_fn(&[2, 3], |i| (i as f64).sin());
    let grad_of = |hard: bool| {
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let soft = tape.softmax(v).unwrap();
        let y = if hard {
            tape.straight_through(soft, Tensor::full(&[2, 3], 0.5)).unwrap()
        } else {
            soft
        };
        let wv = tape.constant(&w);
        let p = tape.mul(y, wv).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        tape.grad(v).unwrap().to_vec()
    };
    assert_eq!(grad_of(true), grad_of(false));
}

#[test]
fn attention_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = random(&[4, 6], &mut rng, -2.0, 2.0);
    let mut changed = base.clone();
    // perturb the last position's q, k and v
    changed.data_mut()[18..].iter_mut().for_each(|v| *v += 1.0);
    let mut tape = Tape::new();
    let a = tape.leaf(base);
    let b = tape.leaf(changed);
    let ya = tape.causal_attention(a, 1, 4, 1).unwrap();
    let yb = tape.causal_attention(b, 1, 4, 1).unwrap();
    assert_eq!(&tape.data(ya)[..6], &tape.data(yb)[..6]);
    assert_ne!(&tape.data(ya)[6..], &tape.data(yb)[6..]);
}

#[test]
fn backward_examples() {
    let w = Tensor::from_fn(&[5], |i| i as f64 * 0.5 - 1.0);
    let mut tape = Tape::new();
    let v = tape.param(&w);
    let s = tape.sum(v);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[1.0; 5]);

    let mut tape = Tape::new();
    let v = tape.param(&w);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    let twice: Vec<f64> = w.data().iter().map(|x| 2.0 * x).collect();
    assert_eq!(tape.grad(v).unwrap(), twice.as_slice());
}

#[test]
fn backward_twice_doubles_gradients_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[3, 4], &mut rng, -2.0, 2.0);
    let b = random(&[4, 2], &mut rng, -2.0, 2.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.param(&a), tape.param(&b));
    let y = tape.matmul(va, vb).unwrap();
    let y = tape.gelu(y);
    let loss = tape.mean(y);
    tape.backward(loss).unwrap();
    let once: Vec<f64> = tape.grad(va).unwrap().to_vec();
    tape.backward(loss).unwrap();
    let doubled: Vec<f64> = once.iter().map(|g| 2.0 * g).collect();
    assert_eq!(tape.grad(va).unwrap(), doubled.as_slice());
    tape.zero_grad();
    assert!(tape.grad(va).is_none());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let v = tape.param(&Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn reachable_intermediates_receive_gradients() {
    let mut tape = Tape::new();
    let v = tape.param(&t(&[2], &[1.0, 2.0]));
    let c = tape.constant(&t(&[2], &[3.0, 4.0]));
    let h = tape.mul(v, c).unwrap();
    let s = tape.sum(h);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(h).unwrap(), &[1.0, 1.0]);
    assert!(tape.grad(c).is_none());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(xs in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[xs.len()], xs).unwrap());
        let y = tape.softmax(x).unwrap();
        let s: f64 = tape.data(y).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(tape.data(y).iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn cross_entropy_is_non_negative(xs in prop::collection::vec(-30.0f64..30.0, 6), target in 0usize..6) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 6], xs).unwrap());
        let loss = tape.cross_entropy(x, &[target]).unwrap();
        prop_assert!(tape.value(loss).item() >= 0.0);
    }

    #[test]
    fn tensor_shape_matches_data(rows in 0usize..5, cols in 0usize..5) {
        let z = Tensor::zeros(&[rows, cols]);
        prop_assert_eq!(z.numel(), rows * cols);
        prop_assert!(Tensor::new(&[rows, cols], vec![0.0; rows * cols + 1]).is_err());
    }
}
