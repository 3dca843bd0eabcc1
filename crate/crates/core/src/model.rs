//! The full network: patch embedding, learned positions, patch encoder,
//! label tokens, label-token decoder and the shared sigmoid head.

use std::collections::BTreeMap;
use std::path::Path;

use mlt_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{decoder_layer, encoder_layer, DecoderLayerWeights, EncoderLayerWeights};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::init::{glorot_uniform, normal, EMBEDDING_STD};
use crate::params::join;
use crate::util::{atomic_write, take_rows};
use crate::Ctx;

/// Affine map `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl Linear<Tensor> {
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot_uniform(fan_in, fan_out, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

impl<T> Linear<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }

    pub fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &T) -> Result<U, E>,
    ) -> Result<Linear<U>, E> {
        Ok(Linear {
            weight: f(join(prefix, "weight"), &self.weight)?,
            bias: f(join(prefix, "bias"), &self.bias)?,
        })
    }
}

/// Every trainable tensor of the network, generic over storage so the same
/// layout serves plain tensors and tape variables.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    /// `W_I [patch_dim × d]` plus bias.
    pub patch_embed: Linear<T>,
    /// `W_{n_x} [n_x × d]`.
    pub pos_embed: T,
    pub encoder: Vec<EncoderLayerWeights<T>>,
    /// `W_t [L × d]`.
    pub label_embed: T,
    pub decoder: Vec<DecoderLayerWeights<T>>,
    /// `W_p [d × 1]` plus bias, shared by all label tokens.
    pub head: Linear<T>,
}

/// Optimizer parameter groups, each with its own learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Patch embedding, standing in for the image backbone.
    Backbone,
    /// Positional table and patch self-attention layers.
    Encoder,
    /// Label embeddings, label-token layers and the head.
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Backbone, ParamGroup::Encoder, ParamGroup::Decoder];

    pub fn of(name: &str) -> ParamGroup {
        let root = name.split('.').next().unwrap_or(name);
        match root {
            "patch_embed" => ParamGroup::Backbone,
            "pos_embed" | "encoder" => ParamGroup::Encoder,
            _ => ParamGroup::Decoder,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Decoder => "decoder",
        }
    }
}

impl ModelParams<Tensor> {
    /// Draws fresh parameters from `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, h, m) = (cfg.d, cfg.n_heads, cfg.d_mlp);
        let patch_embed = Linear::init(cfg.patch_dim, d, &mut rng);
        let pos_embed = normal(&[cfg.n_x, d], EMBEDDING_STD, &mut rng);
        let encoder = (0..cfg.n_encoder_layers)
            .map(|_| EncoderLayerWeights::init(d, h, m, &mut rng))
            .collect::<Result<_>>()?;
        let label_embed = normal(&[cfg.num_labels, d], EMBEDDING_STD, &mut rng);
        let decoder = (0..cfg.n_decoder_layers)
            .map(|_| DecoderLayerWeights::init(d, h, m, &mut rng))
            .collect::<Result<_>>()?;
        let head = Linear::init(d, 1, &mut rng);
        Ok(Self {
            patch_embed,
            pos_embed,
            encoder,
            label_embed,
            decoder,
            head,
        })
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.try_map::<_, ()>(&mut |_, t| Ok(tape.param(t.clone())))
            .expect("infallible")
    }

    /// Registers every tensor as a constant (no gradients).
    pub fn to_tape_constant(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.try_map::<_, ()>(&mut |_, t| Ok(tape.constant(t.clone())))
            .expect("infallible")
    }

    /// Named tensors in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

impl ModelParams<Var> {
    /// Gradients collected after `tape.backward`, in canonical order. Tensors
    /// that did not influence the loss get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, v| {
            out.push(tape.grad(*v).unwrap_or_else(|| Tensor::zeros(tape.shape(*v))));
        });
        out
    }
}

impl<T> ModelParams<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.patch_embed.visit("patch_embed", f);
        f("pos_embed".into(), &self.pos_embed);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("encoder.{i}"), f);
        }
        f("label_embed".into(), &self.label_embed);
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("decoder.{i}"), f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        self.patch_embed.visit_mut("patch_embed", f);
        f("pos_embed".into(), &mut self.pos_embed);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&format!("encoder.{i}"), f);
        }
        f("label_embed".into(), &mut self.label_embed);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&format!("decoder.{i}"), f);
        }
        self.head.visit_mut("head", f);
    }

    pub fn try_map<U, E>(&self, f: &mut dyn FnMut(String, &T) -> Result<U, E>) -> Result<ModelParams<U>, E> {
        Ok(ModelParams {
            patch_embed: self.patch_embed.try_map("patch_embed", f)?,
            pos_embed: f("pos_embed".into(), &self.pos_embed)?,
            encoder: self
                .encoder
                .iter()
                .enumerate()
                .map(|(i, l)| l.try_map(&format!("encoder.{i}"), f))
                .collect::<Result<_, E>>()?,
            label_embed: f("label_embed".into(), &self.label_embed)?,
            decoder: self
                .decoder
                .iter()
                .enumerate()
                .map(|(i, l)| l.try_map(&format!("decoder.{i}"), f))
                .collect::<Result<_, E>>()?,
            head: self.head.try_map("head", f)?,
        })
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }
}

/// Runs the network on raw patches `[B, n_x, patch_dim]` and returns label
/// probabilities `[B, L]`.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    x_raw: Var,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    let logits = forward_logits(tape, params, cfg, x_raw, ctx)?;
    Ok(tape.sigmoid(logits)?)
}

/// Pre-sigmoid head outputs `[B, L]`.
pub fn forward_logits(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    x_raw: Var,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    let s = tape.shape(x_raw).to_vec();
    if s.len() != 3 || s[1] != cfg.n_x || s[2] != cfg.patch_dim {
        return Err(Error::Shape {
            op: "forward",
            expected: vec![0, cfg.n_x, cfg.patch_dim],
            actual: s,
        });
    }
    let b = s[0];
    let x = tape.matmul(x_raw, params.patch_embed.weight)?;
    let x = tape.add(x, params.patch_embed.bias)?;
    let mut x = tape.add(x, params.pos_embed)?;
    for layer in &params.encoder {
        x = encoder_layer(tape, x, layer, ctx)?;
    }
    let labels: Vec<usize> = (0..cfg.num_labels).collect();
    let t0 = tape.gather_rows(params.label_embed, &labels)?;
    let mut t = tape.broadcast_to(t0, &[b, cfg.num_labels, cfg.d])?;
    for layer in &params.decoder {
        t = decoder_layer(tape, t, x, layer, ctx)?;
    }
    let logits = tape.matmul(t, params.head.weight)?;
    let logits = tape.add(logits, params.head.bias)?;
    Ok(tape.reshape(logits, &[b, cfg.num_labels])?)
}

/// Eval-mode probabilities `[N, L]` for inputs `[N, n_x, patch_dim]`,
/// computed `batch` samples at a time.
pub fn predict(params: &ModelParams, cfg: &ModelConfig, x: &Tensor, batch: usize) -> Result<Tensor> {
    let n = x.shape().first().copied().unwrap_or(0);
    let batch = batch.max(1);
    let mut out = Vec::with_capacity(n * cfg.num_labels);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let xb = take_rows(x, &idx)?;
        let mut tape = Tape::new();
        let pv = params.to_tape_constant(&mut tape);
        let xv = tape.constant(xb);
        let mut ctx = Ctx::eval(&mut rng);
        let p = forward(&mut tape, &pv, cfg, xv, &mut ctx)?;
        out.extend_from_slice(tape.value(p).data());
        start = end;
    }
    Ok(Tensor::new(vec![n, cfg.num_labels], out)?)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLTC";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of this tensor's `MLT1` record from the start of the
    /// payload section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    params: Vec<ManifestEntry>,
}

/// Encodes a checkpoint: `MLTC`, a little-endian `u64` header length, the
/// JSON header, then the concatenated `MLT1` records.
pub fn checkpoint_bytes(params: &ModelParams, cfg: &ModelConfig) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, t) in params.named() {
        entries.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.encoded_len() as u64;
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: cfg.clone(),
        params: entries,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.named() {
        t.write_mlt(&mut out).expect("writing to a Vec cannot fail");
    }
    out
}

pub fn save_checkpoint(params: &ModelParams, cfg: &ModelConfig, path: &Path) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(params, cfg))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let corrupt = |m: String| Error::CorruptCheckpoint(m);
    if bytes.len() < 12 {
        return Err(corrupt(format!("{} bytes is too short", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt(format!("bad magic {:?}", &bytes[..4])));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let payload_start = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(12))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header extends past end of file".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| corrupt(format!("header: {e}")))?;
    let cfg = header.config;
    cfg.validate()
        .map_err(|e| corrupt(format!("stored configuration: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut by_name = BTreeMap::new();
    let mut end = 0usize;
    for e in &header.params {
        let start = usize::try_from(e.offset).map_err(|_| corrupt("offset overflow".into()))?;
        let len = mlt_autodiff::encoded_len(&e.shape);
        let stop = start
            .checked_add(len)
            .filter(|&s| s <= payload.len())
            .ok_or_else(|| corrupt(format!("tensor {} is truncated", e.name)))?;
        let t = Tensor::from_mlt_bytes(&payload[start..stop])
            .map_err(|err| corrupt(format!("tensor {}: {err}", e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(corrupt(format!("tensor {} shape disagrees with manifest", e.name)));
        }
        if by_name.insert(e.name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate tensor {}", e.name)));
        }
        end = end.max(stop);
    }
    if end != payload.len() {
        return Err(corrupt(format!("{} unexpected trailing bytes", payload.len() - end)));
    }

    let mut params = ModelParams::init(&cfg)?;
    let mut problem = None;
    params.visit_mut(&mut |name, slot| {
        match by_name.remove(&name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                problem.get_or_insert(format!("{name} has shape {:?}, expected {:?}", t.shape(), slot.shape()));
            }
            None => {
                problem.get_or_insert(format!("missing tensor {name}"));
            }
        }
    });
    if let Some(p) = problem {
        return Err(corrupt(p));
    }
    if let Some(name) = by_name.keys().next() {
        return Err(corrupt(format!("unexpected tensor {name}")));
    }
    if !params.is_finite() {
        return Err(corrupt("non-finite parameter values".into()));
    }
    Ok((params, cfg))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    parse_checkpoint(&bytes)
}

/// Loads a checkpoint and checks that its architecture matches `expected`.
/// Seed and dropout rate do not affect parameter layout and are not compared.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<(ModelParams, ModelConfig)> {
    let (params, cfg) = load_checkpoint(path)?;
    check_compatible(&cfg, expected)?;
    Ok((params, cfg))
}

pub fn check_compatible(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let a = ModelConfig {
        seed: 0,
        dropout: 0.0,
        ..found.clone()
    };
    let b = ModelConfig {
        seed: 0,
        dropout: 0.0,
        ..expected.clone()
    };
    if a != b {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {}, configuration requests {}",
            serde_json::to_string(&a).unwrap_or_default(),
            serde_json::to_string(&b).unwrap_or_default()
        )));
    }
    Ok(())
}
