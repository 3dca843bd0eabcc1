//! MLP block and the post-norm encoder/decoder layers.
//!
//! Every sublayer is wired as `LN[input + D(sublayer(input))]`: the
//! normalization comes after the residual addition.

use mlt_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use crate::attention::{cross_attention, self_attention, MhaOptions, MhaWeights};
use crate::error::{Error, Result};
use crate::init::glorot_uniform;
use crate::params::join;
use crate::Ctx;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormWeights<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

impl LayerNormWeights<Tensor> {
    pub fn init(d: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }
}

impl<T> LayerNormWeights<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }

    pub fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &T) -> Result<U, E>,
    ) -> Result<LayerNormWeights<U>, E> {
        Ok(LayerNormWeights {
            gamma: f(join(prefix, "gamma"), &self.gamma)?,
            beta: f(join(prefix, "beta"), &self.beta)?,
        })
    }
}

fn layer_norm(tape: &mut Tape, x: Var, w: &LayerNormWeights<Var>) -> Result<Var> {
    Ok(tape.layer_norm(x, w.gamma, w.beta, LAYER_NORM_EPS)?)
}

/// `W_g` (GELU) then `W_l` (linear), both with biases.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights<T = Tensor> {
    pub w_g: T,
    pub b_g: T,
    pub w_l: T,
    pub b_l: T,
}

impl MlpWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(d: usize, d_mlp: usize, rng: &mut R) -> Self {
        Self {
            w_g: glorot_uniform(d, d_mlp, rng),
            b_g: Tensor::zeros(&[d_mlp]),
            w_l: glorot_uniform(d_mlp, d, rng),
            b_l: Tensor::zeros(&[d]),
        }
    }
}

impl<T> MlpWeights<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "w_g"), &self.w_g);
        f(join(prefix, "b_g"), &self.b_g);
        f(join(prefix, "w_l"), &self.w_l);
        f(join(prefix, "b_l"), &self.b_l);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "w_g"), &mut self.w_g);
        f(join(prefix, "b_g"), &mut self.b_g);
        f(join(prefix, "w_l"), &mut self.w_l);
        f(join(prefix, "b_l"), &mut self.b_l);
    }

    pub fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &T) -> Result<U, E>,
    ) -> Result<MlpWeights<U>, E> {
        Ok(MlpWeights {
            w_g: f(join(prefix, "w_g"), &self.w_g)?,
            b_g: f(join(prefix, "b_g"), &self.b_g)?,
            w_l: f(join(prefix, "w_l"), &self.w_l)?,
            b_l: f(join(prefix, "b_l"), &self.b_l)?,
        })
    }
}

/// Input self-attention followed by an MLP block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerWeights<T = Tensor> {
    pub sa: MhaWeights<T>,
    pub ln1: LayerNormWeights<T>,
    pub mlp: MlpWeights<T>,
    pub ln2: LayerNormWeights<T>,
}

impl EncoderLayerWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, d_mlp: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            sa: MhaWeights::init(d, heads, rng)?,
            ln1: LayerNormWeights::init(d),
            mlp: MlpWeights::init(d, d_mlp, rng),
            ln2: LayerNormWeights::init(d),
        })
    }
}

impl<T> EncoderLayerWeights<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.sa.visit(&join(prefix, "sa"), f);
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.sa.visit_mut(&join(prefix, "sa"), f);
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
    }

    pub fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &T) -> Result<U, E>,
    ) -> Result<EncoderLayerWeights<U>, E> {
        Ok(EncoderLayerWeights {
            sa: self.sa.try_map(&join(prefix, "sa"), f)?,
            ln1: self.ln1.try_map(&join(prefix, "ln1"), f)?,
            mlp: self.mlp.try_map(&join(prefix, "mlp"), f)?,
            ln2: self.ln2.try_map(&join(prefix, "ln2"), f)?,
        })
    }
}

/// Token self-attention, token-to-image cross-attention, then an MLP block.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerWeights<T = Tensor> {
    pub sa: MhaWeights<T>,
    pub ln1: LayerNormWeights<T>,
    pub ca: MhaWeights<T>,
    pub ln2: LayerNormWeights<T>,
    pub mlp: MlpWeights<T>,
    pub ln3: LayerNormWeights<T>,
}

impl DecoderLayerWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, d_mlp: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            sa: MhaWeights::init(d, heads, rng)?,
            ln1: LayerNormWeights::init(d),
            ca: MhaWeights::init(d, heads, rng)?,
            ln2: LayerNormWeights::init(d),
            mlp: MlpWeights::init(d, d_mlp, rng),
            ln3: LayerNormWeights::init(d),
        })
    }
}

impl<T> DecoderLayerWeights<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.sa.visit(&join(prefix, "sa"), f);
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.ca.visit(&join(prefix, "ca"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
        self.ln3.visit(&join(prefix, "ln3"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.sa.visit_mut(&join(prefix, "sa"), f);
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.ca.visit_mut(&join(prefix, "ca"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        self.ln3.visit_mut(&join(prefix, "ln3"), f);
    }

    pub fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &T) -> Result<U, E>,
    ) -> Result<DecoderLayerWeights<U>, E> {
        Ok(DecoderLayerWeights {
            sa: self.sa.try_map(&join(prefix, "sa"), f)?,
            ln1: self.ln1.try_map(&join(prefix, "ln1"), f)?,
            ca: self.ca.try_map(&join(prefix, "ca"), f)?,
            ln2: self.ln2.try_map(&join(prefix, "ln2"), f)?,
            mlp: self.mlp.try_map(&join(prefix, "mlp"), f)?,
            ln3: self.ln3.try_map(&join(prefix, "ln3"), f)?,
        })
    }
}

fn check_width(tape: &Tape, x: Var, d: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() < 2 || s[s.len() - 1] != d {
        return Err(Error::Shape {
            op,
            expected: vec![d],
            actual: s.to_vec(),
        });
    }
    Ok(())
}

/// `D(D(GELU(Q W_g + b_g)) W_l + b_l)`.
pub fn mlp_block(tape: &mut Tape, q: Var, w: &MlpWeights<Var>, ctx: &mut Ctx<'_>) -> Result<Var> {
    check_width(tape, q, tape.shape(w.w_g)[0], "mlp_block")?;
    let h = tape.matmul(q, w.w_g)?;
    let h = tape.add(h, w.b_g)?;
    let h = tape.gelu(h)?;
    let h = ctx.drop(tape, h)?;
    let out = tape.matmul(h, w.w_l)?;
    let out = tape.add(out, w.b_l)?;
    ctx.drop(tape, out)
}

/// `LN[residual + D(update)]`.
fn add_norm(
    tape: &mut Tape,
    residual: Var,
    update: Var,
    ln: &LayerNormWeights<Var>,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    let update = ctx.drop(tape, update)?;
    let sum = tape.add(residual, update)?;
    layer_norm(tape, sum, ln)
}

/// One patch self-attention layer over `[.., n_x, d]`.
pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    w: &EncoderLayerWeights<Var>,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    check_width(tape, x, tape.shape(w.sa.w_o)[1], "encoder_layer")?;
    let x_xx = self_attention(tape, x, &w.sa, MhaOptions::default(), ctx)?;
    let x_tilde = add_norm(tape, x, x_xx, &w.ln1, ctx)?;
    let x_mlp = mlp_block(tape, x_tilde, &w.mlp, ctx)?;
    add_norm(tape, x_tilde, x_mlp, &w.ln2, ctx)
}

/// One label-token layer: tokens `[.., L, d]` attend to each other, then to
/// the encoded patches `[.., n_x, d]`.
pub fn decoder_layer(
    tape: &mut Tape,
    tokens: Var,
    encoded: Var,
    w: &DecoderLayerWeights<Var>,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    let d = tape.shape(w.sa.w_o)[1];
    check_width(tape, tokens, d, "decoder_layer tokens")?;
    check_width(tape, encoded, d, "decoder_layer encoded")?;
    let t_tt = self_attention(tape, tokens, &w.sa, MhaOptions::default(), ctx)?;
    let t_tilde = add_norm(tape, tokens, t_tt, &w.ln1, ctx)?;
    let t_tx = cross_attention(tape, t_tilde, encoded, &w.ca, MhaOptions::default(), ctx)?;
    let t_tilde_tx = add_norm(tape, t_tilde, t_tx, &w.ln2, ctx)?;
    let t_mlp = mlp_block(tape, t_tilde_tx, &w.mlp, ctx)?;
    add_norm(tape, t_tilde_tx, t_mlp, &w.ln3, ctx)
}
