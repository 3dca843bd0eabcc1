//! Finite-difference verification of every gradient path: each primitive,
//! the attention and transformer blocks, and the full training loss per
//! parameter group.

use mlt_autodiff::checks::check_op;
use mlt_autodiff::fault::with_fault;
use mlt_autodiff::{gradcheck_many, OpKind, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, multi_head_attention, MhaOptions, MhaWeights};
use crate::blocks::{decoder_layer, encoder_layer, mlp_block, DecoderLayerWeights, EncoderLayerWeights, MlpWeights};
use crate::config::{LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams, ParamGroup};
use crate::objectives::{frequency_weights, total_loss};
use crate::Ctx;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Finite-difference step.
    pub step: f64,
    /// Random seeds per primitive.
    pub seeds: u64,
    /// Samples in the full-model fixture batch.
    pub batch: usize,
    pub primitive_tol: f64,
    pub block_tol: f64,
    pub model_tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            loss: LossConfig::default(),
            step: mlt_autodiff::DEFAULT_STEP,
            seeds: 20,
            batch: 4,
            primitive_tol: 1e-6,
            block_tol: 1e-6,
            model_tol: 1e-5,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.step > 0.0) || self.seeds == 0 || self.batch == 0 {
            return Err(Error::Config("gradcheck step, seeds and batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub components: Vec<ComponentResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &ComponentResult> {
        self.components.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, component: &str) -> Option<&ComponentResult> {
        self.components.iter().find(|c| c.component == component)
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(r ⊙ out)` for a random constant `r`.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let c = tape.constant(r.clone());
    let p = tape.mul(out, c)?;
    Ok(tape.sum(p)?)
}

fn flatten<T: Clone>(visit: impl FnOnce(&mut dyn FnMut(String, &T))) -> Vec<T> {
    let mut out = Vec::new();
    visit(&mut |_, t: &T| out.push(t.clone()));
    out
}

fn worst(errs: &[f64]) -> f64 {
    errs.iter().copied().fold(0.0, f64::max)
}

/// Gradient of a random projection of `MHA(Q, K, V)` w.r.t. inputs and
/// weights.
fn check_attention(cfg: &ModelConfig, h: f64, seed: u64, cross: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = MhaWeights::init(cfg.d, cfg.n_heads, &mut rng)?;
    let (n_q, n) = (3, cfg.n_x.max(2));
    let q = uniform(&[2, n_q, cfg.d], &mut rng);
    let k = uniform(&[2, n, cfg.d], &mut rng);
    let v = uniform(&[2, n, cfg.d], &mut rng);
    let r = uniform(&[2, n_q, cfg.d], &mut rng);
    let mut inputs = vec![q, k];
    if !cross {
        inputs.push(v);
    }
    let n_in = inputs.len();
    inputs.extend(flatten(|f| w.visit("", f)));
    let errs = gradcheck_many(
        |tape, vars| {
            let mut i = n_in;
            let wv = w
                .try_map::<_, ()>("", &mut |_, _| {
                    i += 1;
                    Ok(vars[i - 1])
                })
                .expect("infallible");
            let mut drng = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = Ctx::eval(&mut drng);
            let out = if cross {
                cross_attention(tape, vars[0], vars[1], &wv, MhaOptions::default(), &mut ctx)
            } else {
                multi_head_attention(tape, vars[0], vars[1], vars[2], &wv, MhaOptions::default(), &mut ctx)
                    .map(|o| o.output)
            }
            .map_err(to_tensor_err)?;
            project(tape, out, &r).map_err(to_tensor_err)
        },
        &inputs,
        h,
    )?;
    Ok(worst(&errs))
}

fn to_tensor_err(e: Error) -> mlt_autodiff::Error {
    match e {
        Error::Tensor(t) => t,
        other => mlt_autodiff::Error::InvalidArgument(other.to_string()),
    }
}

enum Block {
    Mlp,
    Encoder,
    Decoder,
}

/// Gradient of a random projection of one block in training mode with a
/// fixed dropout mask, w.r.t. inputs and all block weights.
fn check_block(cfg: &ModelConfig, h: f64, seed: u64, block: Block) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, heads, m) = (cfg.d, cfg.n_heads, cfg.d_mlp);
    let tokens = uniform(&[2, cfg.num_labels, d], &mut rng);
    let patches = uniform(&[2, cfg.n_x, d], &mut rng);
    let dropout_seed: u64 = rng.random();
    let rate = cfg.dropout;
    macro_rules! run {
        ($w:expr, $inputs:expr, $out_shape:expr, |$tape:ident, $x:ident, $wv:ident, $ctx:ident| $body:expr) => {{
            let w = $w;
            let mut inputs: Vec<Tensor> = $inputs;
            let n_in = inputs.len();
            inputs.extend(flatten(|f| w.visit("", f)));
            let r = uniform(&$out_shape, &mut rng);
            let errs = gradcheck_many(
                |$tape, vars| {
                    let mut i = n_in;
                    let $wv = w
                        .try_map::<_, ()>("", &mut |_, _| {
                            i += 1;
                            Ok(vars[i - 1])
                        })
                        .expect("infallible");
                    let $x = &vars[..n_in];
                    let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
                    let mut $ctx = Ctx::train(rate, &mut drng);
                    let out = $body.map_err(to_tensor_err)?;
                    project($tape, out, &r).map_err(to_tensor_err)
                },
                &inputs,
                h,
            )?;
            Ok(worst(&errs))
        }};
    }
    match block {
        Block::Mlp => {
            let w = MlpWeights::init(d, m, &mut rng);
            let shape = [2, cfg.n_x, d];
            run!(w, vec![patches], shape, |tape, x, wv, ctx| mlp_block(tape, x[0], &wv, &mut ctx))
        }
        Block::Encoder => {
            let w = perturbed(EncoderLayerWeights::init(d, heads, m, &mut rng)?, &mut rng);
            let shape = [2, cfg.n_x, d];
            run!(w, vec![patches], shape, |tape, x, wv, ctx| encoder_layer(tape, x[0], &wv, &mut ctx))
        }
        Block::Decoder => {
            let w = perturbed_dec(DecoderLayerWeights::init(d, heads, m, &mut rng)?, &mut rng);
            let shape = [2, cfg.num_labels, d];
            run!(w, vec![tokens, patches], shape, |tape, x, wv, ctx| decoder_layer(
                tape, x[0], x[1], &wv, &mut ctx
            ))
        }
    }
}

/// Moves layer-norm affine parameters off their identity initialization so
/// their gradients are exercised at a generic point.
fn perturbed(mut w: EncoderLayerWeights, rng: &mut ChaCha8Rng) -> EncoderLayerWeights {
    w.visit_mut("", &mut |name, t| {
        if name.contains("ln") || name.starts_with("mlp.b") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    });
    w
}

fn perturbed_dec(mut w: DecoderLayerWeights, rng: &mut ChaCha8Rng) -> DecoderLayerWeights {
    w.visit_mut("", &mut |name, t| {
        if name.contains("ln") || name.starts_with("mlp.b") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    });
    w
}

/// Random fixture batch: inputs, binary targets and a mask with one
/// unannotated entry per sample.
pub fn fixture_batch(cfg: &ModelConfig, batch: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[batch, cfg.n_x, cfg.patch_dim], |_| rng.random_range(-1.0..1.0));
    let l = cfg.num_labels;
    let y = Tensor::from_fn(&[batch, l], |i| ((i * 7 + 3) % 5 < 2) as u8 as f64);
    let mask = Tensor::from_fn(&[batch, l], |i| if l > 1 && i % l == (i / l) % l { 0.0 } else { 1.0 });
    (x, y, mask)
}

/// Label weights used by the full-model check: frequency weights from
/// evenly spread rates, so they are not all equal.
fn fixture_weights(l: usize) -> Result<Vec<f64>> {
    frequency_weights(&(0..l).map(|t| 0.1 + 0.3 * t as f64 / l.max(2) as f64).collect::<Vec<_>>())
}

/// Worst relative error of the total training loss per parameter group.
pub fn check_model(cfg: &ModelConfig, loss: &LossConfig, batch: usize, h: f64, seed: u64) -> Result<Vec<(ParamGroup, f64)>> {
    let mut init = ModelParams::init(&ModelConfig { seed, ..cfg.clone() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    init.visit_mut(&mut |name, t| {
        if name.contains(".ln") || name.ends_with("bias") || name.contains(".b_") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    });
    let (x, y, mask) = fixture_batch(cfg, batch, seed);
    let weights = fixture_weights(cfg.num_labels)?;
    let named = init.named();
    let groups: Vec<ParamGroup> = named.iter().map(|(n, _)| ParamGroup::of(n)).collect();
    let mut inputs: Vec<Tensor> = vec![x];
    inputs.extend(named.iter().map(|(_, t)| (*t).clone()));
    let dropout_seed: u64 = rng.random();
    let errs = gradcheck_many(
        |tape, vars| {
            let mut i = 1;
            let pv = init
                .try_map::<_, ()>(&mut |_, _| {
                    i += 1;
                    Ok(vars[i - 1])
                })
                .expect("infallible");
            let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
            let mut ctx = Ctx::train(cfg.dropout, &mut drng);
            let p = forward(tape, &pv, cfg, vars[0], &mut ctx).map_err(to_tensor_err)?;
            let parts = total_loss(tape, &y, &mask, p, &weights, loss).map_err(to_tensor_err)?;
            Ok(parts.total)
        },
        &inputs,
        h,
    )?;
    Ok(ParamGroup::ALL
        .iter()
        .map(|&g| {
            let e = errs[1..]
                .iter()
                .zip(&groups)
                .filter(|(_, &pg)| pg == g)
                .map(|(e, _)| *e)
                .fold(0.0, f64::max);
            (g, e)
        })
        .collect())
}

/// Runs every check, optionally with a corrupted backward rule for one
/// primitive.
pub fn run_suite(cfg: &GradcheckConfig, fault: Option<OpKind>) -> Result<GradcheckReport> {
    cfg.validate()?;
    match fault {
        Some(kind) => with_fault(kind, || suite(cfg)),
        None => suite(cfg),
    }
}

fn suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let h = cfg.step;
    let mut components = Vec::new();
    let mut push = |name: String, err: f64, tol: f64| {
        components.push(ComponentResult {
            component: name,
            max_rel_error: err,
            tolerance: tol,
            passed: err < tol,
        });
    };
    for kind in OpKind::DIFFERENTIABLE {
        let mut e: f64 = 0.0;
        for seed in 0..cfg.seeds {
            e = e.max(check_op(kind, seed, h)?);
        }
        push(format!("primitive.{}", kind.name()), e, cfg.primitive_tol);
    }
    let m = &cfg.model;
    push("block.attention".into(), check_attention(m, h, 11, false)?, cfg.block_tol);
    push("block.cross_attention".into(), check_attention(m, h, 12, true)?, cfg.block_tol);
    push("block.mlp".into(), check_block(m, h, 13, Block::Mlp)?, cfg.block_tol);
    push("block.encoder_layer".into(), check_block(m, h, 14, Block::Encoder)?, cfg.block_tol);
    push("block.decoder_layer".into(), check_block(m, h, 15, Block::Decoder)?, cfg.block_tol);
    for (g, e) in check_model(m, &cfg.loss, cfg.batch, h, m.seed)? {
        push(format!("model.{}", g.name()), e, cfg.model_tol);
    }
    let passed = components.iter().all(|c| c.passed);
    Ok(GradcheckReport { components, passed })
}
