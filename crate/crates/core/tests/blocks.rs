use mlt_core::autodiff::{Tape, Tensor};
use mlt_core::blocks::{decoder_layer, encoder_layer, mlp_block, DecoderLayerWeights, EncoderLayerWeights, MlpWeights};
use mlt_core::Ctx;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(shape: &[usize], seed: u64) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64 + 0.5) * (seed as f64 + 1.3)).cos())
}

fn run_mlp(w: &MlpWeights, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let wv = w.try_map::<_, ()>("", &mut |_, t| Ok(tape.constant(t.clone()))).unwrap();
    let xv = tape.constant(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = mlp_block(&mut tape, xv, &wv, &mut Ctx::eval(&mut rng)).unwrap();
    tape.value(out).clone()
}

fn run_encoder(w: &EncoderLayerWeights, x: &Tensor, ctx_seed: Option<u64>) -> Tensor {
    let mut tape = Tape::new();
    let wv = w.try_map::<_, ()>("", &mut |_, t| Ok(tape.constant(t.clone()))).unwrap();
    let xv = tape.constant(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(ctx_seed.unwrap_or(0));
    let mut ctx = match ctx_seed {
        Some(_) => Ctx::train(0.1, &mut rng),
        None => Ctx::eval(&mut rng),
    };
    let out = encoder_layer(&mut tape, xv, &wv, &mut ctx).unwrap();
    tape.value(out).clone()
}

fn run_decoder(w: &DecoderLayerWeights, t: &Tensor, enc: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let wv = w.try_map::<_, ()>("", &mut |_, t| Ok(tape.constant(t.clone()))).unwrap();
    let (tv, ev) = (tape.constant(t.clone()), tape.constant(enc.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = decoder_layer(&mut tape, tv, ev, &wv, &mut Ctx::eval(&mut rng)).unwrap();
    tape.value(out).clone()
}

#[test]
fn scalar_mlp_is_gelu() {
    let w = MlpWeights {
        w_g: Tensor::ones(&[1, 1]),
        b_g: Tensor::zeros(&[1]),
        w_l: Tensor::ones(&[1, 1]),
        b_l: Tensor::zeros(&[1]),
    };
    let out = run_mlp(&w, &Tensor::ones(&[1, 1]));
    assert!((out.item() - 0.8413447460685429).abs() < 1e-9);
}

#[test]
fn zero_mlp_gives_zero() {
    let w = MlpWeights {
        w_g: Tensor::zeros(&[4, 16]),
        b_g: Tensor::zeros(&[16]),
        w_l: Tensor::zeros(&[16, 4]),
        b_l: Tensor::zeros(&[4]),
    };
    assert!(run_mlp(&w, &rows(&[3, 4], 1)).data().iter().all(|&v| v == 0.0));
}

fn zeroed(mut w: EncoderLayerWeights) -> EncoderLayerWeights {
    w.visit_mut("", &mut |name, t| {
        if !name.contains("ln") {
            *t = Tensor::zeros(t.shape());
        }
    });
    w
}

#[test]
fn zero_sublayers_reduce_to_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = zeroed(EncoderLayerWeights::init(8, 2, 32, &mut rng).unwrap());
    let constant = Tensor::from_fn(&[3, 8], |i| (i / 8) as f64 * 2.5 - 1.0);
    assert!(run_encoder(&w, &constant, None).data().iter().all(|v| v.abs() < 1e-9));

    // LN(LN(x)) with unit gain, zero shift.
    let x = rows(&[3, 8], 4);
    let ln = |t: &Tensor| {
        let mut out = t.clone();
        for r in out.data_mut().chunks_mut(8) {
            let mean = r.iter().sum::<f64>() / 8.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            r.iter_mut().for_each(|v| *v = (*v - mean) / (var + 1e-5).sqrt());
        }
        out
    };
    assert!(run_encoder(&w, &x, None).max_abs_diff(&ln(&ln(&x))) < 1e-12);
}

#[test]
fn layers_preserve_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let enc = EncoderLayerWeights::init(8, 4, 16, &mut rng).unwrap();
    let dec = DecoderLayerWeights::init(8, 4, 16, &mut rng).unwrap();
    let x = rows(&[2, 5, 8], 1);
    let encoded = run_encoder(&enc, &x, None);
    assert_eq!(encoded.shape(), &[2, 5, 8]);
    let t = rows(&[2, 3, 8], 2);
    assert_eq!(run_decoder(&dec, &t, &encoded).shape(), &[2, 3, 8]);
}

#[test]
fn eval_mode_is_deterministic_and_training_depends_on_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let enc = EncoderLayerWeights::init(8, 2, 16, &mut rng).unwrap();
    let x = rows(&[4, 8], 6);
    assert_eq!(run_encoder(&enc, &x, None), run_encoder(&enc, &x, None));
    assert_eq!(run_encoder(&enc, &x, Some(1)), run_encoder(&enc, &x, Some(1)));
    assert_ne!(run_encoder(&enc, &x, Some(1)), run_encoder(&enc, &x, Some(2)));
}

#[test]
fn single_token_self_attention_is_the_single_key_case() {
    // With L = 1, the token self-attention output does not depend on W_Q or W_K.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dec = DecoderLayerWeights::init(8, 2, 16, &mut rng).unwrap();
    let mut other = dec.clone();
    for w in other.sa.w_q.iter_mut().chain(other.sa.w_k.iter_mut()) {
        *w = w.map(|v| -3.0 * v + 0.1);
    }
    let t = rows(&[1, 8], 1);
    let enc = rows(&[6, 8], 2);
    assert!(run_decoder(&dec, &t, &enc).max_abs_diff(&run_decoder(&other, &t, &enc)) < 1e-13);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decoder_ignores_order_of_encoded_rows(seed in 0u64..500, perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec = DecoderLayerWeights::init(8, 2, 16, &mut rng).unwrap();
        let t = rows(&[3, 8], seed);
        let enc = rows(&[6, 8], seed + 11);
        let penc = Tensor::from_fn(&[6, 8], |i| enc.data()[perm[i / 8] * 8 + i % 8]);
        prop_assert!(run_decoder(&dec, &t, &enc).max_abs_diff(&run_decoder(&dec, &t, &penc)) < 1e-12);
    }
}
