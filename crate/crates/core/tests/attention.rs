use mlt_core::attention::{cross_attention, multi_head_attention, self_attention, MhaOptions, MhaWeights};
use mlt_core::autodiff::{Tape, Tensor, Var};
use mlt_core::Ctx;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn eye(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| (i / n == i % n) as u8 as f64)
}

fn on_tape(tape: &mut Tape, w: &MhaWeights) -> MhaWeights<Var> {
    w.try_map::<_, ()>("", &mut |_, t| Ok(tape.constant(t.clone()))).unwrap()
}

fn random_weights(d: usize, heads: usize, seed: u64) -> MhaWeights {
    MhaWeights::init(d, heads, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_rows(n: usize, d: usize, seed: u64) -> Tensor {
    Tensor::from_fn(&[n, d], |i| ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin() * 1.5)
}

/// Runs MHA in eval mode; returns the output and the head probabilities.
fn run(w: &MhaWeights, q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let wv = on_tape(&mut tape, w);
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::eval(&mut rng);
    let out = multi_head_attention(&mut tape, qv, kv, vv, &wv, MhaOptions::default(), &mut ctx).unwrap();
    let probs = out.probs.iter().map(|p| tape.value(*p).clone()).collect();
    (tape.value(out.output).clone(), probs)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = t.shape()[1];
    Tensor::from_fn(t.shape(), |i| t.data()[perm[i / d] * d + i % d])
}

#[test]
fn identity_weights_two_tokens() {
    let w = MhaWeights::new(2, vec![eye(2)], vec![eye(2)], vec![eye(2)], eye(2)).unwrap();
    let x = eye(2);
    let (out, _) = run(&w, &x, &x, &x);
    // Row i attends with logits e_i · e_j / √2.
    let a = 1.0 / 2f64.sqrt();
    let hi = a.exp() / (a.exp() + 1.0);
    let lo = 1.0 / (a.exp() + 1.0);
    let want = [hi, lo, lo, hi];
    for (g, w) in out.data().iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn single_key_takes_all_weight() {
    let w = random_weights(8, 2, 3);
    let q = random_rows(5, 8, 1);
    let k = random_rows(1, 8, 2);
    let (out, probs) = run(&w, &q, &k, &k);
    assert!(probs.iter().all(|p| p.data().iter().all(|&v| v == 1.0)));
    // Every query row equals concat_h(K W_V^h) W_O.
    let mut proj = Vec::new();
    for wv in &w.w_v {
        for j in 0..4 {
            proj.push((0..8).map(|i| k.data()[i] * wv.at(&[i, j])).sum::<f64>());
        }
    }
    for r in 0..5 {
        for j in 0..8 {
            let want: f64 = (0..8).map(|i| proj[i] * w.w_o.at(&[i, j])).sum();
            assert!((out.at(&[r, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn logits_are_scaled_by_root_head_dim() {
    // N_h = 1 with identity projections: probabilities are softmax(Q Kᵀ / √d).
    for d in [1usize, 4] {
        let w = MhaWeights::new(d, vec![eye(d)], vec![eye(d)], vec![eye(d)], eye(d)).unwrap();
        let q = Tensor::full(&[1, d], 1.0);
        let k = Tensor::from_fn(&[2, d], |i| if i < d { 1.0 } else { 0.0 });
        let (_, probs) = run(&w, &q, &k, &k);
        let logit = d as f64 / (d as f64).sqrt();
        let want = logit.exp() / (logit.exp() + 1.0);
        assert!((probs[0].data()[0] - want).abs() < 1e-12, "d = {d}");
    }
}

#[test]
fn self_and_cross_attention_delegate_bitwise() {
    let w = random_weights(8, 4, 5);
    let q = random_rows(6, 8, 1);
    let k = random_rows(3, 8, 2);
    let mut tape = Tape::new();
    let wv = on_tape(&mut tape, &w);
    let (qv, kv) = (tape.constant(q), tape.constant(k));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::eval(&mut rng);
    let sa = self_attention(&mut tape, qv, &wv, MhaOptions::default(), &mut ctx).unwrap();
    let mha = multi_head_attention(&mut tape, qv, qv, qv, &wv, MhaOptions::default(), &mut ctx).unwrap();
    assert_eq!(tape.value(sa), tape.value(mha.output));
    let ca = cross_attention(&mut tape, qv, kv, &wv, MhaOptions::default(), &mut ctx).unwrap();
    let mha = multi_head_attention(&mut tape, qv, kv, kv, &wv, MhaOptions::default(), &mut ctx).unwrap();
    assert_eq!(tape.value(ca), tape.value(mha.output));
}

#[test]
fn batched_inputs_match_per_sample_results() {
    let w = random_weights(8, 2, 9);
    let xs: Vec<Tensor> = (0..3).map(|s| random_rows(4, 8, s)).collect();
    let batch = Tensor::new(vec![3, 4, 8], xs.iter().flat_map(|t| t.data().to_vec()).collect()).unwrap();
    let (out, _) = run(&w, &batch, &batch, &batch);
    for (s, x) in xs.iter().enumerate() {
        let (one, _) = run(&w, x, x, x);
        assert!(Tensor::new(vec![4, 8], out.data()[s * 32..(s + 1) * 32].to_vec())
            .unwrap()
            .max_abs_diff(&one)
            < 1e-13);
    }
}

#[test]
fn mismatched_shapes_are_errors() {
    let w = random_weights(8, 2, 1);
    let mut tape = Tape::new();
    let wv = on_tape(&mut tape, &w);
    let q = tape.constant(random_rows(2, 8, 0));
    let k = tape.constant(random_rows(3, 6, 0));
    let v = tape.constant(random_rows(2, 8, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::eval(&mut rng);
    assert!(multi_head_attention(&mut tape, q, k, k, &wv, MhaOptions::default(), &mut ctx).is_err());
    let k = tape.constant(random_rows(3, 8, 0));
    assert!(multi_head_attention(&mut tape, q, k, v, &wv, MhaOptions::default(), &mut ctx).is_err());
}

fn permutation() -> impl Strategy<Value = Vec<usize>> {
    Just((0..6).collect::<Vec<usize>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn probability_rows_are_normalized(seed in 0u64..1000, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let w = random_weights(8, heads, seed);
        let q = random_rows(5, 8, seed + 1);
        let k = random_rows(7, 8, seed + 2);
        let (_, probs) = run(&w, &q, &k, &k);
        for p in probs {
            for row in p.data().chunks(7) {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_attention_is_row_equivariant(seed in 0u64..1000, perm in permutation()) {
        let w = random_weights(8, 2, seed);
        let x = random_rows(6, 8, seed + 7);
        let px = permute_rows(&x, &perm);
        let (out, _) = run(&w, &x, &x, &x);
        let (pout, _) = run(&w, &px, &px, &px);
        prop_assert!(permute_rows(&out, &perm).max_abs_diff(&pout) < 1e-12);
    }

    #[test]
    fn cross_attention_ignores_key_order(seed in 0u64..1000, perm in permutation()) {
        let w = random_weights(8, 4, seed);
        let q = random_rows(3, 8, seed + 1);
        let k = random_rows(6, 8, seed + 2);
        let pk = permute_rows(&k, &perm);
        let (out, _) = run(&w, &q, &k, &k);
        let (pout, _) = run(&w, &q, &pk, &pk);
        prop_assert!(out.max_abs_diff(&pout) < 1e-12);
    }
}
