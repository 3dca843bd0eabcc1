use mlt_autodiff::{gradcheck, normal_cdf, Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..k).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum()
    })
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
    let b = tape.constant(Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]));
    let out = tape.matmul(eye, b).unwrap();
    assert_eq!(
        tape.value(out),
        &Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]])
    );

    let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
    let c = tape.constant(Tensor::from_rows(&[[5.0], [6.0]]));
    let out = tape.matmul(a, c).unwrap();
    assert_eq!(tape.value(out), &Tensor::from_rows(&[[17.0], [39.0]]));
}

#[test]
fn matmul_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[7, 5], &mut rng);
    let b = random(&[5, 9], &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb).unwrap();
    assert!(tape.value(out).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn batched_matmul_broadcasts_rank_two_lhs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.shape(out), &[2, 3, 5]);
    for batch in 0..2 {
        let slice =
            Tensor::new(vec![4, 5], b.data()[batch * 20..(batch + 1) * 20].to_vec()).unwrap();
        let expect = naive_matmul(&a, &slice);
        let got = Tensor::new(
            vec![3, 5],
            tape.value(out).data()[batch * 15..(batch + 1) * 15].to_vec(),
        )
        .unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_is_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let mut tape = Tape::new();
    let va = tape.param(a);
    let vb = tape.constant(b.clone());
    let prod = tape.matmul(va, vb).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    let bt = Tensor::from_fn(&[2, 4], |i| b.at(&[i % 4, i / 4]));
    let expect = naive_matmul(&Tensor::ones(&[3, 2]), &bt);
    assert!(tape.grad(va).unwrap().max_abs_diff(&expect) < 1e-12);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
    let y = tape.softmax(x).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::new(vec![2], vec![0.0, 2f64.ln()]).unwrap());
    let y = tape.softmax(x).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((v[1] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_survives_huge_logits() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![1000.0, 999.0, -1e30]).unwrap());
    let y = tape.softmax(x).unwrap();
    let v = tape.value(y).data();
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let gamma = tape.constant(Tensor::ones(&[2]));
    let beta = tape.constant(Tensor::zeros(&[2]));
    let constant = tape.constant(Tensor::full(&[1, 2], 7.0));
    let y = tape.layer_norm(constant, gamma, beta, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // Tiny eps approaches the exact standardization [-1, 1].
    let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
    let y = tape.layer_norm(x, gamma, beta, 1e-300).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gamma = tape.constant(Tensor::ones(&[16]));
    let beta = tape.constant(Tensor::zeros(&[16]));
    let x = tape.constant(random(&[5, 16], &mut rng));
    let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
    for row in tape.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
    }
}

#[test]
fn gelu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![0.0, 10.0, 1.0]).unwrap());
    let y = tape.gelu(x).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-9);
    // Φ(1) from the complementary error function series, independent of libm.
    assert!((v[2] - 0.841_344_746_068_542_9).abs() < 1e-12);
    assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
}

#[test]
fn sigmoid_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![4], vec![0.0, 3f64.ln(), 800.0, -800.0]).unwrap());
    let y = tape.sigmoid(x).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.5);
    assert!((v[1] - 0.75).abs() < 1e-15);
    assert_eq!(v[2], 1.0);
    assert_eq!(v[3], 0.0);
}

#[test]
fn dropout_rate_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[10]));
    assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.1, false, &mut rng).unwrap(), x);
    assert!(matches!(
        tape.dropout(x, 1.0, true, &mut rng),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        tape.dropout(x, -0.1, true, &mut rng),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn dropout_zero_fraction_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1_000_000]));
    let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
    let v = tape.value(y).data();
    let zeros = v.iter().filter(|&&z| z == 0.0).count() as f64 / v.len() as f64;
    assert!((zeros - 0.5).abs() < 0.002, "zero fraction {zeros}");
    assert!(v.iter().all(|&z| z == 0.0 || z == 2.0));
}

#[test]
fn backward_simple_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = random(&[3, 2], &mut rng);
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), Tensor::ones(&[3, 2]));

    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().max_abs_diff(&x0.map(|v| 2.0 * v)) < 1e-15);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.ln(x), Err(Error::NonFinite("ln"))));
    assert!(matches!(tape.div(x, x), Err(Error::NonFinite("div"))));
}

#[test]
fn gradient_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x0 = random(&[4, 6], &mut rng);
        let w0 = random(&[6, 6], &mut rng);
        let mut tape = Tape::new();
        let x = tape.param(x0);
        let w = tape.param(w0);
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h).unwrap();
        let h = tape.dropout(h, 0.3, true, &mut rng).unwrap();
        let p = tape.softmax(h).unwrap();
        let l = tape.ln(p).unwrap();
        let s = tape.sum(l).unwrap();
        tape.backward(s).unwrap();
        (tape.grad(x).unwrap(), tape.grad(w).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn gradcheck_sum_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[4, 3], &mut rng);
    let err = gradcheck(|t, v| t.sum(v), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[3, 4], &mut rng);
    let w = random(&[4, 4], &mut rng);
    let err = gradcheck(
        move |t, v| {
            let w = t.constant(w.clone());
            let h = t.matmul(v, w)?;
            let h = t.sigmoid(h)?;
            let h = t.mul(h, v)?;
            let p = t.softmax(h)?;
            let lp = t.ln(p)?;
            t.mean(lp)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}
