//! Multi-head attention with self- and cross-attention specializations.
//!
//! Each head `h` projects queries, keys and values with its own `d × d_k`
//! matrices, mixes values with `softmax(Q̃ K̃ᵀ / √d_k)`, and the concatenated
//! heads are projected back to width `d` by `W_O`. Projections carry no bias.

use mlt_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::init::glorot_uniform;
use crate::params::join;
use crate::Ctx;

/// Per-head projection matrices plus the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaWeights<T = Tensor> {
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    pub w_o: T,
}

impl MhaWeights<Tensor> {
    /// Checks that every matrix is consistent with width `d` and `heads`.
    pub fn new(d: usize, w_q: Vec<Tensor>, w_k: Vec<Tensor>, w_v: Vec<Tensor>, w_o: Tensor) -> Result<Self> {
        let heads = w_q.len();
        if heads == 0 || d % heads != 0 || w_k.len() != heads || w_v.len() != heads {
            return Err(Error::Config(format!(
                "{heads} heads incompatible with d = {d}"
            )));
        }
        let dk = d / heads;
        for w in w_q.iter().chain(&w_k).chain(&w_v) {
            expect_shape("mha projection", w.shape(), &[d, dk])?;
        }
        expect_shape("mha output", w_o.shape(), &[heads * dk, d])?;
        Ok(Self { w_q, w_k, w_v, w_o })
    }

    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d = {d} is not divisible by N_h = {heads}")));
        }
        let dk = d / heads;
        let proj = |rng: &mut R| (0..heads).map(|_| glorot_uniform(d, dk, rng)).collect();
        let w_q = proj(rng);
        let w_k = proj(rng);
        let w_v = proj(rng);
        let w_o = glorot_uniform(heads * dk, d, rng);
        Ok(Self { w_q, w_k, w_v, w_o })
    }
}

impl<T> MhaWeights<T> {
    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (name, ws) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            for (h, w) in ws.iter().enumerate() {
                f(join(prefix, &format!("{name}.{h}")), w);
            }
        }
        f(join(prefix, "w_o"), &self.w_o);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (name, ws) in [("w_q", &mut self.w_q), ("w_k", &mut self.w_k), ("w_v", &mut self.w_v)] {
            for (h, w) in ws.iter_mut().enumerate() {
                f(join(prefix, &format!("{name}.{h}")), w);
            }
        }
        f(join(prefix, "w_o"), &mut self.w_o);
    }

    pub fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &T) -> Result<U, E>,
    ) -> Result<MhaWeights<U>, E> {
        let mut heads = |name: &str, ws: &[T]| -> Result<Vec<U>, E> {
            ws.iter()
                .enumerate()
                .map(|(h, w)| f(join(prefix, &format!("{name}.{h}")), w))
                .collect()
        };
        let w_q = heads("w_q", &self.w_q)?;
        let w_k = heads("w_k", &self.w_k)?;
        let w_v = heads("w_v", &self.w_v)?;
        let w_o = f(join(prefix, "w_o"), &self.w_o)?;
        Ok(MhaWeights { w_q, w_k, w_v, w_o })
    }
}

/// Boolean `[n_q × n]` matrix of disallowed query/key pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    n_q: usize,
    n: usize,
    disallowed: Vec<bool>,
}

/// Logit offset applied to disallowed pairs.
pub const MASK_LOGIT: f64 = -1e30;

impl AttentionMask {
    pub fn new(n_q: usize, n: usize, disallowed: Vec<bool>) -> Result<Self> {
        if disallowed.len() != n_q * n || n_q == 0 || n == 0 {
            return Err(Error::Shape {
                op: "attention mask",
                expected: vec![n_q, n],
                actual: vec![disallowed.len()],
            });
        }
        if let Some(row) = disallowed.chunks(n).position(|r| r.iter().all(|&x| x)) {
            return Err(Error::FullyMaskedRow(row));
        }
        Ok(Self { n_q, n, disallowed })
    }

    fn additive(&self) -> Tensor {
        Tensor::new(
            vec![self.n_q, self.n],
            self.disallowed
                .iter()
                .map(|&x| if x { MASK_LOGIT } else { 0.0 })
                .collect(),
        )
        .expect("mask shape is consistent")
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MhaOptions<'m> {
    pub mask: Option<&'m AttentionMask>,
    /// Dropout on attention probabilities; unused by the reference model.
    pub attn_dropout: f64,
}

pub struct MhaOutput {
    pub output: Var,
    /// Attention probabilities per head, each `[.., n_q, n]`.
    pub probs: Vec<Var>,
}

fn expect_shape(op: &'static str, actual: &[usize], expected: &[usize]) -> Result<()> {
    if actual != expected {
        return Err(Error::Shape {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}

fn last_dim(tape: &Tape, v: Var) -> usize {
    tape.shape(v).last().copied().unwrap_or(0)
}

/// `Concat(H¹, …, H^{N_h}) W_O` over queries `[.., n_q, d]` and keys/values
/// `[.., n, d]`; batch extents broadcast.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w: &MhaWeights<Var>,
    opts: MhaOptions<'_>,
    ctx: &mut Ctx<'_>,
) -> Result<MhaOutput> {
    let heads = w.heads();
    let d = last_dim(tape, q);
    if heads == 0 || d == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads incompatible with d = {d}")));
    }
    let dk = d / heads;
    for x in [k, v] {
        if tape.shape(x).len() < 2 || last_dim(tape, x) != d {
            return Err(Error::Shape {
                op: "multi_head_attention",
                expected: vec![d],
                actual: tape.shape(x).to_vec(),
            });
        }
    }
    let (sk, sv) = (tape.shape(k), tape.shape(v));
    if sk[sk.len() - 2] != sv[sv.len() - 2] {
        return Err(Error::Shape {
            op: "multi_head_attention keys/values",
            expected: sk.to_vec(),
            actual: sv.to_vec(),
        });
    }
    for wm in w.w_q.iter().chain(&w.w_k).chain(&w.w_v) {
        expect_shape("mha projection", tape.shape(*wm), &[d, dk])?;
    }
    expect_shape("mha output", tape.shape(w.w_o), &[heads * dk, d])?;

    let mask = match opts.mask {
        Some(m) => {
            let n_q = tape.shape(q)[tape.shape(q).len() - 2];
            let n = sk[sk.len() - 2];
            if (m.n_q, m.n) != (n_q, n) {
                return Err(Error::Shape {
                    op: "attention mask",
                    expected: vec![n_q, n],
                    actual: vec![m.n_q, m.n],
                });
            }
            Some(tape.constant(m.additive()))
        }
        None => None,
    };

    let project = |tape: &mut Tape, x: Var, ws: &[Var]| -> Result<Var> {
        let fused = if ws.len() == 1 { ws[0] } else { tape.concat(ws, 1)? };
        Ok(tape.matmul(x, fused)?)
    };
    let q_all = project(tape, q, &w.w_q)?;
    let q_all = tape.scale(q_all, 1.0 / (dk as f64).sqrt())?;
    let k_all = project(tape, k, &w.w_k)?;
    let v_all = project(tape, v, &w.w_v)?;
    let axis = tape.shape(q_all).len() - 1;
    let k_axis = tape.shape(k_all).len() - 1;

    let mut head_out = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = if heads == 1 { q_all } else { tape.narrow(q_all, axis, h * dk, dk)? };
        let kh = if heads == 1 { k_all } else { tape.narrow(k_all, k_axis, h * dk, dk)? };
        let vh = if heads == 1 { v_all } else { tape.narrow(v_all, k_axis, h * dk, dk)? };
        let kt = tape.transpose(kh)?;
        let mut scores = tape.matmul(qh, kt)?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let p = tape.softmax(scores)?;
        probs.push(p);
        let p = tape.dropout(p, opts.attn_dropout, ctx.training, &mut *ctx.rng)?;
        head_out.push(tape.matmul(p, vh)?);
    }
    let concat = if heads == 1 { head_out[0] } else { tape.concat(&head_out, axis)? };
    let output = tape.matmul(concat, w.w_o)?;
    Ok(MhaOutput { output, probs })
}

/// `MHA(Q, Q, Q)`.
pub fn self_attention(
    tape: &mut Tape,
    q: Var,
    w: &MhaWeights<Var>,
    opts: MhaOptions<'_>,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    Ok(multi_head_attention(tape, q, q, q, w, opts, ctx)?.output)
}

/// `MHA(Q, K, K)`.
pub fn cross_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    w: &MhaWeights<Var>,
    opts: MhaOptions<'_>,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    Ok(multi_head_attention(tape, q, k, k, w, opts, ctx)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_rejects_fully_masked_row() {
        assert!(matches!(
            AttentionMask::new(2, 2, vec![false, true, true, true]),
            Err(Error::FullyMaskedRow(1))
        ));
    }

    #[test]
    fn weights_require_divisible_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MhaWeights::init(10, 4, &mut rng).is_err());
        let w = MhaWeights::init(8, 2, &mut rng).unwrap();
        assert_eq!(w.w_q[0].shape(), &[8, 4]);
        assert_eq!(w.w_o.shape(), &[8, 8]);
    }

    #[test]
    fn masked_keys_get_zero_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = MhaWeights::init(4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let wv = w.try_map::<_, ()>("", &mut |_, t| Ok(tape.constant(t.clone()))).unwrap();
        let x = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).sin()));
        let mask = AttentionMask::new(3, 3, vec![false, true, false, false, false, true, true, false, false]).unwrap();
        let mut ctx = Ctx::eval(&mut rng);
        let out = multi_head_attention(
            &mut tape,
            x,
            x,
            x,
            &wv,
            MhaOptions { mask: Some(&mask), attn_dropout: 0.0 },
            &mut ctx,
        )
        .unwrap();
        for p in out.probs {
            let v = tape.value(p);
            assert_eq!(v.at(&[0, 1]), 0.0);
            assert_eq!(v.at(&[1, 2]), 0.0);
            assert_eq!(v.at(&[2, 0]), 0.0);
        }
    }
}
