//! Training objective: frequency-weighted masked binary cross-entropy on
//! smoothed targets plus a soft Dice term.
//!
//! Targets and masks are `[B, L]` tensors; a mask entry of 0 marks a label
//! without annotation, which contributes nothing to either term.

use mlt_autodiff::{Tape, Tensor, Var};

use crate::config::{LabelWeights, LossConfig};
use crate::error::{Error, Result};

/// `−[y ln p + (1 − y) ln(1 − p)]` with `p` clamped to `[clamp, 1 − clamp]`.
pub fn bce(y: f64, p: f64, clamp: f64) -> f64 {
    let p = p.clamp(clamp, 1.0 - clamp);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `w_t = (1/r_t) / Σ_i (1/r_i) · L`.
pub fn frequency_weights(rates: &[f64]) -> Result<Vec<f64>> {
    if rates.is_empty() {
        return Err(Error::Config("no positive rates given".into()));
    }
    if let Some(r) = rates.iter().find(|&&r| !(r > 0.0 && r < 1.0)) {
        return Err(Error::Config(format!("positive rate {r} outside (0, 1)")));
    }
    let inv: Vec<f64> = rates.iter().map(|r| 1.0 / r).collect();
    let total: f64 = inv.iter().sum();
    let l = rates.len() as f64;
    Ok(inv.iter().map(|w| w / total * l).collect())
}

/// Turns a weight setting into `L` concrete weights. `rates` are the
/// training split's positive rates, needed for [`LabelWeights::Frequency`].
pub fn resolve_weights(spec: &LabelWeights, num_labels: usize, rates: Option<&[f64]>) -> Result<Vec<f64>> {
    let w = match spec {
        LabelWeights::Uniform => vec![1.0; num_labels],
        LabelWeights::Frequency => {
            let r = rates.ok_or_else(|| {
                Error::Config("frequency weights need the training positive rates".into())
            })?;
            frequency_weights(r)?
        }
        LabelWeights::Rates(r) => frequency_weights(r)?,
        LabelWeights::Explicit(w) => w.clone(),
    };
    if w.len() != num_labels {
        return Err(Error::Config(format!(
            "{} label weights for L = {num_labels}",
            w.len()
        )));
    }
    Ok(w)
}

/// `y (1 − ε) + ε / 2`.
pub fn smooth_labels(y: &Tensor, eps: f64) -> Result<Tensor> {
    if !(0.0..0.5).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 0.5)")));
    }
    Ok(y.map(|v| v * (1.0 - eps) + eps / 2.0))
}

fn check_targets(tape: &Tape, y: &Tensor, mask: &Tensor, p: Var, op: &'static str) -> Result<(usize, usize)> {
    let ps = tape.shape(p);
    if ps.len() != 2 || y.shape() != ps || mask.shape() != ps {
        return Err(Error::Shape {
            op,
            expected: ps.to_vec(),
            actual: if y.shape() != ps { y.shape().to_vec() } else { mask.shape().to_vec() },
        });
    }
    Ok((ps[0], ps[1]))
}

/// `Σ_{annotated (b,t)} w_t · BCE(y_bt, p_bt) / #annotated`.
pub fn weighted_masked_bce(
    tape: &mut Tape,
    y: &Tensor,
    mask: &Tensor,
    p: Var,
    weights: &[f64],
    clamp: f64,
) -> Result<Var> {
    let (_, l) = check_targets(tape, y, mask, p, "weighted_masked_bce")?;
    if weights.len() != l {
        return Err(Error::Shape {
            op: "weighted_masked_bce weights",
            expected: vec![l],
            actual: vec![weights.len()],
        });
    }
    let count = mask.data().iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let coef = Tensor::from_fn(mask.shape(), |i| {
        if mask.data()[i] != 0.0 {
            weights[i % l] / count as f64
        } else {
            0.0
        }
    });

    let pc = tape.clamp(p, clamp, 1.0 - clamp)?;
    let log_p = tape.ln(pc)?;
    let q = tape.scale(pc, -1.0)?;
    let q = tape.offset(q, 1.0)?;
    let log_q = tape.ln(q)?;
    let yv = tape.constant(y.clone());
    let one_minus_y = tape.constant(y.map(|v| 1.0 - v));
    let a = tape.mul(yv, log_p)?;
    let b = tape.mul(one_minus_y, log_q)?;
    let ll = tape.add(a, b)?;
    let c = tape.constant(coef.map(|v| -v));
    let terms = tape.mul(ll, c)?;
    Ok(tape.sum(terms)?)
}

/// `1 − mean_t (2 Σ p y + ε) / (Σ p² + Σ y² + ε)` over annotated entries,
/// averaging only labels with at least one annotated entry.
pub fn dice_loss(tape: &mut Tape, y: &Tensor, mask: &Tensor, p: Var, smooth: f64) -> Result<Var> {
    let (b, l) = check_targets(tape, y, mask, p, "dice_loss")?;
    let mut annotated = vec![false; l];
    let mut y_sq = vec![0.0; l];
    for i in 0..b * l {
        if mask.data()[i] != 0.0 {
            annotated[i % l] = true;
            y_sq[i % l] += y.data()[i] * y.data()[i];
        }
    }
    let included = annotated.iter().filter(|&&a| a).count();
    if included == 0 {
        return Err(Error::EmptyBatch);
    }
    let m = tape.constant(mask.map(|v| if v != 0.0 { 1.0 } else { 0.0 }));
    let mp = tape.mul(p, m)?;
    let yv = tape.constant(y.clone());
    let mpy = tape.mul(mp, yv)?;
    let inter = tape.sum_axis(mpy, 0)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.offset(num, smooth)?;
    let mpp = tape.mul(mp, p)?;
    let p_sq = tape.sum_axis(mpp, 0)?;
    let y_sq = tape.constant(Tensor::new(vec![l], y_sq.iter().map(|v| v + smooth).collect())?);
    let den = tape.add(p_sq, y_sq)?;
    let ratio = tape.div(num, den)?;
    let sel = tape.constant(Tensor::new(
        vec![l],
        annotated
            .iter()
            .map(|&a| if a { -1.0 / included as f64 } else { 0.0 })
            .collect(),
    )?);
    let weighted = tape.mul(ratio, sel)?;
    let neg_mean = tape.sum(weighted)?;
    Ok(tape.offset(neg_mean, 1.0)?)
}

/// The three logged loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub bce: Var,
    pub dice: Var,
    pub total: Var,
}

/// `weighted_masked_bce(smooth(y)) + λ_dice · dice_loss(y)`.
pub fn total_loss(
    tape: &mut Tape,
    y: &Tensor,
    mask: &Tensor,
    p: Var,
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<LossParts> {
    let soft = smooth_labels(y, cfg.label_smoothing)?;
    let bce = weighted_masked_bce(tape, &soft, mask, p, weights, cfg.clamp_p)?;
    let dice = dice_loss(tape, y, mask, p, cfg.dice_smooth)?;
    let total = if cfg.dice_weight == 0.0 {
        bce
    } else {
        let scaled = tape.scale(dice, cfg.dice_weight)?;
        tape.add(bce, scaled)?
    };
    Ok(LossParts { bce, dice, total })
}
