use super::*;
use crate::rng::stream;
use rand::Rng;

fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = stream(seed, 0xA0, 0);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Scalarizes a node with fixed random weights so every output entry matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = random_tensor(tape.value(out).shape(), seed ^ 0x55, -1.0, 1.0);
    let w = tape.leaf(w, false);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

#[test]
fn conv2d_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 3, 3], 1.0), false);
    let k = tape.leaf(Tensor::full(&[1, 1, 1, 1], 1.0), false);
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[1, 3, 3], 1.0));
}

#[test]
fn conv2d_sum_reduction() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let k = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), false);
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[10.0]);
}

#[test]
fn conv2d_output_extent_formula() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 9, 7]), false);
    let k = tape.leaf(Tensor::zeros(&[4, 2, 3, 2]), false);
    let y = tape.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[4, (9 + 2 - 3) / 2 + 1, (7 + 2 - 2) / 2 + 1]);
}

#[test]
fn conv2d_rejects_mismatch_naming_both_shapes() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 5, 5]), false);
    let k = tape.leaf(Tensor::zeros(&[3, 4, 3, 3]), false);
    let msg = tape.conv2d(x, k, 1, 0).unwrap_err().to_string();
    assert!(msg.contains("[2, 5, 5]") && msg.contains("[3, 4, 3, 3]"), "{msg}");
    let big = tape.leaf(Tensor::zeros(&[1, 2, 6, 6]), false);
    let x2 = tape.leaf(Tensor::zeros(&[2, 5, 5]), false);
    assert!(tape.conv2d(x2, big, 1, 0).is_err());
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for seed in 0..10 {
        let kernel = random_tensor(&[3, 2, 3, 3], seed + 100, -1.0, 1.0);
        let input = random_tensor(&[2, 5, 5], seed, -1.0, 1.0);
        let report = finite_difference_check(
            |t, x| {
                let k = t.leaf(kernel.clone(), false);
                let y = t.conv2d(x, k, 1, 1)?;
                project(t, y, seed)
            },
            &input,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {}", report.max_relative_error);

        let report = finite_difference_check(
            |t, k| {
                let x = t.leaf(input.clone(), false);
                let y = t.conv2d(x, k, 2, 0)?;
                project(t, y, seed)
            },
            &kernel,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {}", report.max_relative_error);
    }
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 0.5]).unwrap(), false);
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0]);

    let c = tape.leaf(Tensor::full(&[2, 4, 4], 0.7), false);
    let y = tape.maxpool2d(c, 2, 2).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[2, 2, 2], 0.7));

    let small = tape.leaf(Tensor::zeros(&[1, 2, 2]), false);
    assert!(tape.maxpool2d(small, 3, 1).is_err());
}

#[test]
fn maxpool_routes_gradient_to_first_tied_cell() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 2, 2], 1.0), true);
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_gradient_matches_finite_differences() {
    for seed in 0..10 {
        // distinct values keep every window away from ties
        let mut rng = stream(seed, 0xB0, 0);
        let mut values: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        for i in (1..16).rev() {
            values.swap(i, rng.gen_range(0..=i));
        }
        let input = Tensor::new(vec![1, 4, 4], values).unwrap();
        let report = finite_difference_check(
            |t, x| {
                let y = t.maxpool2d(x, 2, 2)?;
                project(t, y, seed)
            },
            &input,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}");
    }
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 0.0]).unwrap(), false);
    let r = tape.relu(x);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(r).data()[0], 0.0);
    assert_eq!(tape.value(s).data()[1], 0.5);
}

#[test]
fn relu_derivative_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
    let r = tape.relu(x);
    let s = tape.sum(r);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn activation_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut input = random_tensor(&[3, 4], seed, -3.0, 3.0);
        // keep relu inputs away from the kink
        input.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 0.05 {
                *v += 0.1
            }
        });
        for kind in [Activation::Relu, Activation::Sigmoid] {
            let report = finite_difference_check(
                |t, x| {
                    let y = t.activation(x, kind);
                    project(t, y, seed)
                },
                &input,
                1e-4,
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "{kind:?} seed {seed}: {}", report.max_relative_error);
        }
    }
}

#[test]
fn dense_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), false);
    let eye = tape.leaf(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }), false);
    let zero_b = tape.leaf(Tensor::zeros(&[3]), false);
    let y = tape.dense(x, eye, Some(zero_b)).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
    let zeros = tape.leaf(Tensor::zeros(&[2, 3]), false);
    let y = tape.dense(x, zeros, None).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    let bad = tape.leaf(Tensor::zeros(&[2, 4]), false);
    assert!(tape.dense(x, bad, None).is_err());
}

#[test]
fn dense_gradients_match_finite_differences() {
    for seed in 0..10 {
        let x = random_tensor(&[4], seed, -1.0, 1.0);
        let w = random_tensor(&[3, 4], seed + 1, -1.0, 1.0);
        let b = random_tensor(&[3], seed + 2, -1.0, 1.0);
        let report = finite_difference_check(
            |t, wv| {
                let xv = t.leaf(x.clone(), false);
                let bv = t.leaf(b.clone(), true);
                let y = t.dense(xv, wv, Some(bv))?;
                project(t, y, seed)
            },
            &w,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "weights seed {seed}");
        for (which, point) in [("input", &x), ("bias", &b)] {
            let report = finite_difference_check(
                |t, v| {
                    let wv = t.leaf(w.clone(), false);
                    let y = if which == "input" {
                        let bv = t.leaf(b.clone(), false);
                        t.dense(v, wv, Some(bv))?
                    } else {
                        let xv = t.leaf(x.clone(), false);
                        t.dense(xv, wv, Some(v))?
                    };
                    project(t, y, seed)
                },
                point,
                1e-4,
                1e-6,
            )
            .unwrap();
            assert!(report.passed(), "{which} seed {seed}");
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::full(&[4], 0.3), false);
    let l = tape.softmax_cross_entropy(z, 2).unwrap();
    assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let z = tape.leaf(Tensor::new(vec![3], vec![0.0, 1000.0, 0.0]).unwrap(), false);
    let l = tape.softmax_cross_entropy(z, 1).unwrap();
    assert!(tape.value(l).item().abs() < 1e-12);
    assert!(tape.value(l).is_finite());

    assert!(matches!(
        tape.softmax_cross_entropy(z, 3),
        Err(Error::LabelOutOfRange { label: 3, classes: 3 })
    ));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let logits = random_tensor(&[5], seed, -3.0, 3.0);
        let label = (seed % 5) as usize;
        let report = finite_difference_check(|t, z| t.softmax_cross_entropy(z, label), &logits, 1e-4, 1e-6).unwrap();
        assert!(report.passed(), "seed {seed}: {}", report.max_relative_error);
    }
}

#[test]
fn backward_of_leaf_is_one() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let g = tape.backward(x).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0]);
}

#[test]
fn backward_accumulates_reused_leaf() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let y = tape.add(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn backward_accumulates_into_parameter_store() {
    let mut store = ParameterStore::new();
    let id = store.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
    for _ in 0..2 {
        let mut tape = Tape::new();
        let w = tape.param(&store, id, true);
        let s = tape.sum(w);
        tape.backward(s).unwrap().accumulate_into(&tape, &mut store);
    }
    assert_eq!(store.grad(id).data(), &[2.0, 2.0]);
    store.zero_grad();
    assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
}

#[test]
fn gradcheck_square_and_constant() {
    let report = finite_difference_check(|t, x| t.mul(x, x), &Tensor::scalar(3.0), 1e-4, 1e-7).unwrap();
    let e = &report.entries[0];
    assert_eq!(e.analytic, 6.0);
    assert!((e.numeric - 6.0).abs() < 1e-7);
    assert!(report.passed());

    let report = finite_difference_check(
        |t, x| {
            let c = t.leaf(Tensor::scalar(4.0), false);
            let z = t.scale(x, 0.0);
            t.add(z, c)
        },
        &Tensor::scalar(1.5),
        1e-4,
        1e-7,
    )
    .unwrap();
    assert_eq!(report.max_relative_error, 0.0);
    assert_eq!(report.entries[0].analytic, 0.0);
}

#[test]
fn gradcheck_flags_non_finite_without_failing() {
    let report =
        finite_difference_check(|t, x| Ok(t.log_similarity(x, -1.0)), &Tensor::scalar(1.0), 1e-4, 1e-5).unwrap();
    assert!(report.non_finite);
    assert!(!report.passed());
}

#[test]
fn sqrt_derivative_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![0.0, 4.0]).unwrap(), true);
    let y = tape.sqrt(x);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.25]);
}

#[test]
fn composite_ops_gradients_match_finite_differences() {
    for seed in 0..10 {
        let latent = random_tensor(&[3, 2, 3], seed, 0.0, 1.0);
        let protos = random_tensor(&[4, 3], seed + 9, 0.0, 1.0);
        let report = finite_difference_check(
            |t, z| {
                let p = t.leaf(protos.clone(), true);
                let d = t.prototype_sq_distances(z, p)?;
                let e = t.sqrt(d);
                let s = t.log_similarity(e, 1e-4);
                let pooled = t.spatial_max(s)?;
                let m = t.mean_over(s, &[0, 7, 13])?;
                let lo = t.min_over(d, &[2, 3, 4, 20])?;
                let a = project(t, pooled, seed)?;
                let b = t.add(a, m)?;
                t.add(b, lo)
            },
            &latent,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {}", report.max_relative_error);
        let report = finite_difference_check(
            |t, p| {
                let z = t.leaf(latent.clone(), false);
                let d = t.prototype_sq_distances(z, p)?;
                let l1 = t.masked_abs_sum(p, (0..12).map(|i| i % 2 == 0).collect())?;
                let a = project(t, d, seed)?;
                t.add(a, l1)
            },
            &protos,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "prototype seed {seed}: {}", report.max_relative_error);
    }
}

#[test]
fn identical_tapes_give_bitwise_identical_gradients() {
    let input = random_tensor(&[2, 6, 6], 3, -1.0, 1.0);
    let kernel = random_tensor(&[2, 2, 3, 3], 4, -1.0, 1.0);
    let run = || {
        let mut t = Tape::new();
        let x = t.leaf(input.clone(), true);
        let k = t.leaf(kernel.clone(), true);
        let y = t.conv2d(x, k, 1, 1).unwrap();
        let y = t.sigmoid(y);
        let p = t.maxpool2d(y, 2, 2).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        (g.get(x).unwrap().clone(), g.get(k).unwrap().clone())
    };
    assert_eq!(run(), run());
}
