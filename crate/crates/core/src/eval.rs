//! Temporal smoothing of frame probabilities, thresholding and F1 scores.

use mlt_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sequence};
use crate::error::{Error, Result};

/// Centered moving mean with window `w`, truncated at both ends: frame `i`
/// averages frames `i − ⌊(w−1)/2⌋ ..= i + (w − 1 − ⌊(w−1)/2⌋)` that exist.
pub fn moving_mean(values: &[f64], w: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptySequence);
    }
    if w == 0 {
        return Err(Error::Config("moving-mean window must be >= 1".into()));
    }
    let n = values.len();
    let left = (w - 1) / 2;
    let right = w - 1 - left;
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(n - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect())
}

/// Smooths every label of `[N, L]` probabilities independently within each
/// sequence; windows never reach across a sequence boundary.
pub fn smooth_sequences(p: &Tensor, sequences: &[Sequence], w: usize) -> Result<Tensor> {
    if p.rank() != 2 {
        return Err(Error::Shape {
            op: "smooth_sequences",
            expected: vec![0, 0],
            actual: p.shape().to_vec(),
        });
    }
    let (n, l) = (p.shape()[0], p.shape()[1]);
    let covered: usize = sequences.iter().map(|s| s.length).sum();
    if covered != n {
        return Err(Error::Dataset(format!("sequences cover {covered} of {n} frames")));
    }
    let mut out = p.clone();
    for s in sequences {
        if s.length == 0 {
            return Err(Error::EmptySequence);
        }
        if s.start + s.length > n {
            return Err(Error::Dataset(format!("sequence {} exceeds {n} frames", s.id)));
        }
        for t in 0..l {
            let col: Vec<f64> = (s.start..s.start + s.length).map(|f| p.data()[f * l + t]).collect();
            for (k, v) in moving_mean(&col, w)?.into_iter().enumerate() {
                out.data_mut()[(s.start + k) * l + t] = v;
            }
        }
    }
    Ok(out)
}

/// `[p ≥ τ]`.
pub fn threshold(p: &Tensor, tau: f64) -> Tensor {
    p.map(|v| if v >= tau { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// `2TP / (2TP + FP + FN)`, or 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_label_f1: Vec<f64>,
    pub macro_f1: f64,
    pub confusion: Vec<Confusion>,
}

/// Per-label and macro F1 of binary predictions against binary targets,
/// counting only annotated entries.
pub fn f1_scores(pred: &Tensor, y: &Tensor, mask: &Tensor) -> Result<F1Scores> {
    if pred.rank() != 2 || y.shape() != pred.shape() || mask.shape() != pred.shape() {
        return Err(Error::Shape {
            op: "f1_scores",
            expected: pred.shape().to_vec(),
            actual: if y.shape() != pred.shape() { y.shape().to_vec() } else { mask.shape().to_vec() },
        });
    }
    let l = pred.shape()[1];
    let mut conf = vec![Confusion::default(); l];
    for i in 0..pred.numel() {
        if mask.data()[i] == 0.0 {
            continue;
        }
        let c = &mut conf[i % l];
        match (pred.data()[i] >= 0.5, y.data()[i] >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let per_label_f1: Vec<f64> = conf.iter().map(Confusion::f1).collect();
    let macro_f1 = per_label_f1.iter().sum::<f64>() / l as f64;
    Ok(F1Scores {
        per_label_f1,
        macro_f1,
        confusion: conf,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub threshold: f64,
    pub window: usize,
    pub num_samples: usize,
    pub unsmoothed: F1Scores,
    pub smoothed: F1Scores,
}

/// Scores `[N, L]` probabilities against a dataset, before and after
/// moving-mean smoothing.
pub fn evaluate(p: &Tensor, data: &Dataset, tau: f64, window: usize) -> Result<EvalReport> {
    if p.shape() != data.y.shape() {
        return Err(Error::Shape {
            op: "evaluate",
            expected: data.y.shape().to_vec(),
            actual: p.shape().to_vec(),
        });
    }
    let smoothed = smooth_sequences(p, &data.sequences, window)?;
    Ok(EvalReport {
        labels: data.labels.clone(),
        threshold: tau,
        window,
        num_samples: data.num_samples(),
        unsmoothed: f1_scores(&threshold(p, tau), &data.y, &data.mask)?,
        smoothed: f1_scores(&threshold(&smoothed, tau), &data.y, &data.mask)?,
    })
}
