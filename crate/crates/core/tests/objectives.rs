use mlt_core::autodiff::{Tape, Tensor};
use mlt_core::config::LossConfig;
use mlt_core::objectives::{bce, dice_loss, frequency_weights, smooth_labels, total_loss, weighted_masked_bce};
use proptest::prelude::*;

const LN2: f64 = std::f64::consts::LN_2;

fn scalar_loss(y: &Tensor, mask: &Tensor, p: &Tensor, w: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let pv = tape.param(p.clone());
    let out = weighted_masked_bce(&mut tape, y, mask, pv, w, 1e-12).unwrap();
    tape.value(out).item()
}

#[test]
fn weighted_bce_hand_example() {
    let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let p = Tensor::full(&[1, 2], 0.5);
    let got = scalar_loss(&y, &Tensor::ones(&[1, 2]), &p, &[2.0, 1.0]);
    assert!((got - 1.5 * LN2).abs() < 1e-9);
    assert!((got - 1.039721).abs() < 1e-6);
}

#[test]
fn uniform_weights_full_mask_is_mean_bce() {
    let y = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let p = Tensor::new(vec![2, 2], vec![0.9, 0.2, 0.4, 0.7]).unwrap();
    let want = (0..4).map(|i| bce(y.data()[i], p.data()[i], 1e-12)).sum::<f64>() / 4.0;
    let got = scalar_loss(&y, &Tensor::ones(&[2, 2]), &p, &[1.0, 1.0]);
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn fully_masked_sample_is_dropped() {
    let y = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
    let p = Tensor::new(vec![2, 2], vec![0.6, 0.3, 0.1, 0.2]).unwrap();
    let mask = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let got = scalar_loss(&y, &mask, &p, &[1.3, 0.7]);
    let y1 = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let p1 = Tensor::new(vec![1, 2], vec![0.6, 0.3]).unwrap();
    let want = scalar_loss(&y1, &Tensor::ones(&[1, 2]), &p1, &[1.3, 0.7]);
    assert!((got - want).abs() < 1e-15);
}

#[test]
fn frequency_weight_examples() {
    let w = frequency_weights(&[0.1, 0.4]).unwrap();
    assert!((w[0] - 1.6).abs() < 1e-9);
    assert!((w[1] - 0.4).abs() < 1e-9);
    let eq = frequency_weights(&[0.2; 5]).unwrap();
    assert!(eq.iter().all(|w| (w - 1.0).abs() < 1e-12));
}

#[test]
fn dice_examples() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::zeros(&[1, 1]));
    let d = dice_loss(&mut tape, &Tensor::ones(&[1, 1]), &Tensor::ones(&[1, 1]), p, 1.0).unwrap();
    assert!((tape.value(d).item() - 0.5).abs() < 1e-9);

    let y = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    for eps in [1e-3, 1.0, 10.0] {
        let mut tape = Tape::new();
        let p = tape.param(y.clone());
        let d = dice_loss(&mut tape, &y, &Tensor::ones(&[3, 2]), p, eps).unwrap();
        assert!(tape.value(d).item().abs() < 1e-15);
    }
}

#[test]
fn label_smoothing_examples() {
    let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let s = smooth_labels(&y, 0.1).unwrap();
    assert!((s.data()[0] - 0.95).abs() < 1e-9);
    assert!((s.data()[1] - 0.05).abs() < 1e-9);
    assert_eq!(smooth_labels(&y, 0.0).unwrap(), y);
    assert!(smooth_labels(&y, 0.5).is_err());
    assert!(smooth_labels(&y, -0.1).is_err());
}

/// Scalar-by-scalar evaluation of the full objective.
fn brute_force_total(y: &[Vec<f64>], mask: &[Vec<f64>], p: &[Vec<f64>], w: &[f64], cfg: &LossConfig) -> f64 {
    let (b, l) = (y.len(), y[0].len());
    let eps = cfg.label_smoothing;
    let mut num = 0.0;
    let mut count = 0.0;
    for i in 0..b {
        for t in 0..l {
            if mask[i][t] == 1.0 {
                let ys = y[i][t] * (1.0 - eps) + eps / 2.0;
                let pc = p[i][t].clamp(cfg.clamp_p, 1.0 - cfg.clamp_p);
                num += w[t] * -(ys * pc.ln() + (1.0 - ys) * (1.0 - pc).ln());
                count += 1.0;
            }
        }
    }
    let mut dice_sum = 0.0;
    let mut labels = 0.0;
    for t in 0..l {
        let rows: Vec<usize> = (0..b).filter(|&i| mask[i][t] == 1.0).collect();
        if rows.is_empty() {
            continue;
        }
        let inter: f64 = rows.iter().map(|&i| p[i][t] * y[i][t]).sum();
        let pp: f64 = rows.iter().map(|&i| p[i][t] * p[i][t]).sum();
        let yy: f64 = rows.iter().map(|&i| y[i][t] * y[i][t]).sum();
        dice_sum += (2.0 * inter + cfg.dice_smooth) / (pp + yy + cfg.dice_smooth);
        labels += 1.0;
    }
    num / count + cfg.dice_weight * (1.0 - dice_sum / labels)
}

fn flat(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

#[test]
fn total_loss_matches_brute_force_on_tiny_fixture() {
    let y = vec![vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]];
    let mask = vec![vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 1.0]];
    let p = vec![vec![0.8, 0.3, 0.55], vec![0.1, 0.6, 0.7]];
    let w = [1.2, 0.5, 1.3];
    let cfg = LossConfig::default();
    let mut tape = Tape::new();
    let pv = tape.param(flat(&p));
    let parts = total_loss(&mut tape, &flat(&y), &flat(&mask), pv, &w, &cfg).unwrap();
    let want = brute_force_total(&y, &mask, &p, &w, &cfg);
    assert!((tape.value(parts.total).item() - want).abs() < 1e-12);

    let cfg0 = LossConfig {
        dice_weight: 0.0,
        label_smoothing: 0.0,
        ..LossConfig::default()
    };
    let mut tape = Tape::new();
    let pv = tape.param(flat(&p));
    let parts = total_loss(&mut tape, &flat(&y), &flat(&mask), pv, &w, &cfg0).unwrap();
    assert!((tape.value(parts.total).item() - brute_force_total(&y, &mask, &p, &w, &cfg0)).abs() < 1e-12);
}

#[test]
fn perfect_predictions_give_near_zero_loss() {
    let y = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let cfg = LossConfig {
        label_smoothing: 0.0,
        ..LossConfig::default()
    };
    let mut tape = Tape::new();
    let pv = tape.param(y.clone());
    let parts = total_loss(&mut tape, &y, &Tensor::ones(&[2, 2]), pv, &[1.0, 1.0], &cfg).unwrap();
    let v = tape.value(parts.total).item();
    assert!((0.0..1e-10).contains(&v));
}

#[test]
fn masked_entries_get_exactly_zero_gradient() {
    let y = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let mask = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let p = Tensor::new(vec![2, 3], vec![0.3, 0.6, 0.2, 0.9, 0.4, 0.5]).unwrap();
    let w = [1.0, 2.0, 0.5];
    let cfg = LossConfig::default();
    let mut tape = Tape::new();
    let pv = tape.param(p.clone());
    let parts = total_loss(&mut tape, &y, &mask, pv, &w, &cfg).unwrap();
    tape.backward(parts.total).unwrap();
    let g = tape.grad(pv).unwrap();
    for i in 0..6 {
        if mask.data()[i] == 0.0 {
            assert_eq!(g.data()[i], 0.0, "entry {i}");
        } else {
            assert!(g.data()[i] != 0.0);
        }
    }
    // Finite differences agree: moving a masked entry leaves the loss unchanged.
    let value = |p: &Tensor| {
        let mut tape = Tape::new();
        let pv = tape.param(p.clone());
        let parts = total_loss(&mut tape, &y, &mask, pv, &w, &cfg).unwrap();
        tape.value(parts.total).item()
    };
    let base = value(&p);
    for i in [1, 3, 5] {
        let mut q = p.clone();
        q.data_mut()[i] += 1e-3;
        assert_eq!(value(&q), base);
    }
}

#[test]
fn empty_batch_is_an_error() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::full(&[1, 2], 0.5));
    let r = total_loss(
        &mut tape,
        &Tensor::zeros(&[1, 2]),
        &Tensor::zeros(&[1, 2]),
        p,
        &[1.0, 1.0],
        &LossConfig::default(),
    );
    assert!(matches!(r, Err(mlt_core::Error::EmptyBatch)));
}

fn fixture() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..5, 1usize..5).prop_flat_map(|(b, l)| {
        (
            Just(b),
            Just(l),
            prop::collection::vec(prop::bool::ANY.prop_map(|v| v as u8 as f64), b * l),
            prop::collection::vec(prop::bool::weighted(0.8).prop_map(|v| v as u8 as f64), b * l),
            prop::collection::vec(0.001f64..0.999, b * l),
            prop::collection::vec(0.1f64..3.0, l),
        )
    })
}

proptest! {
    #[test]
    fn doubling_weights_doubles_bce((b, l, y, mask, p, w) in fixture()) {
        prop_assume!(mask.iter().any(|&m| m == 1.0));
        let y = Tensor::new(vec![b, l], y).unwrap();
        let mask = Tensor::new(vec![b, l], mask).unwrap();
        let p = Tensor::new(vec![b, l], p).unwrap();
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let one = scalar_loss(&y, &mask, &p, &w);
        let two = scalar_loss(&y, &mask, &p, &w2);
        prop_assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn loss_is_nonnegative_and_dice_below_one((b, l, y, mask, p, w) in fixture()) {
        prop_assume!(mask.iter().any(|&m| m == 1.0));
        let y = Tensor::new(vec![b, l], y).unwrap();
        let mask = Tensor::new(vec![b, l], mask).unwrap();
        let mut tape = Tape::new();
        let pv = tape.param(Tensor::new(vec![b, l], p).unwrap());
        let parts = total_loss(&mut tape, &y, &mask, pv, &w, &LossConfig::default()).unwrap();
        let dice = tape.value(parts.dice).item();
        prop_assert!(tape.value(parts.total).item() >= 0.0);
        prop_assert!((0.0..1.0).contains(&dice));
    }

    #[test]
    fn frequency_weights_sum_to_label_count(rates in prop::collection::vec(0.001f64..0.999, 1..20)) {
        let w = frequency_weights(&rates).unwrap();
        prop_assert!((w.iter().sum::<f64>() - rates.len() as f64).abs() < 1e-9);
        prop_assert!(w.iter().all(|&v| v > 0.0));
    }
}
