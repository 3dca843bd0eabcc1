//! JSON configuration documents.
//!
//! Every struct rejects unknown keys and fills missing keys from its
//! `Default`, so `{}` is a valid document for any of them.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Field names on the wire match the usual
/// notation (`N_h`, `N_x`, `N_l`, `L`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Attention heads per multi-head attention module.
    #[serde(rename = "N_h")]
    pub n_heads: usize,
    /// Patch self-attention (encoder) layers.
    #[serde(rename = "N_x")]
    pub n_encoder_layers: usize,
    /// Label-token (decoder) layers.
    #[serde(rename = "N_l")]
    pub n_decoder_layers: usize,
    /// Patches per image.
    pub n_x: usize,
    /// Raw feature length of one patch.
    pub patch_dim: usize,
    /// Number of labels.
    #[serde(rename = "L")]
    pub num_labels: usize,
    pub d_mlp: usize,
    pub dropout: f64,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            n_heads: 8,
            n_encoder_layers: 1,
            n_decoder_layers: 2,
            n_x: 64,
            patch_dim: 16,
            num_labels: 12,
            d_mlp: 512,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 2,
            n_x: 4,
            patch_dim: 3,
            num_labels: 3,
            d_mlp: 16,
            dropout: 0.1,
            seed: 7,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d", self.d),
            ("N_h", self.n_heads),
            ("N_x", self.n_encoder_layers),
            ("N_l", self.n_decoder_layers),
            ("n_x", self.n_x),
            ("patch_dim", self.patch_dim),
            ("L", self.num_labels),
            ("d_mlp", self.d_mlp),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d = {} is not divisible by N_h = {}",
                self.d, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "model.dropout = {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// How per-label BCE weights are obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelWeights {
    /// All weights 1.
    Uniform,
    /// Inverse positive rates taken from the training dataset manifest.
    Frequency,
    /// Inverse of the given positive rates.
    Rates(Vec<f64>),
    /// Weights used as given.
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LabelWeights,
    pub dice_weight: f64,
    pub dice_smooth: f64,
    pub label_smoothing: f64,
    pub clamp_p: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LabelWeights::Frequency,
            dice_weight: 1.0,
            dice_smooth: 1.0,
            label_smoothing: 0.1,
            clamp_p: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice_weight >= 0.0 && self.dice_weight.is_finite()) {
            return Err(Error::Config("loss.dice_weight must be >= 0".into()));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config("loss.dice_smooth must be > 0".into()));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Config("loss.label_smoothing must lie in [0, 0.5)".into()));
        }
        if !(self.clamp_p > 0.0 && self.clamp_p < 0.5) {
            return Err(Error::Config("loss.clamp_p must lie in (0, 0.5)".into()));
        }
        match &self.weights {
            LabelWeights::Explicit(w) if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) => {
                Err(Error::Config("loss.weights must be strictly positive".into()))
            }
            LabelWeights::Rates(r) if r.iter().any(|&x| !(x > 0.0 && x < 1.0)) => {
                Err(Error::Config("loss.weights rates must lie in (0, 1)".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Learning-rate schedule for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// `lr0 · decay^(step / interval)`; `interval = None` means one epoch.
    ExpDecay {
        lr0: f64,
        decay: f64,
        #[serde(default)]
        interval: Option<f64>,
    },
    /// Inverse square-root schedule with linear warmup, scaled by
    /// `scale_dim^-0.5`; `scale_dim = None` takes the group's natural size
    /// (`n_x` for the encoder, `L` for the decoder).
    Warmup {
        #[serde(default)]
        scale_dim: Option<usize>,
        warmup_steps: u64,
    },
}

impl ScheduleSpec {
    pub fn validate(&self, group: &str) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("optim.{group}: {msg}")));
        match *self {
            ScheduleSpec::ExpDecay { lr0, decay, interval } => {
                if !(lr0 > 0.0) {
                    return bad("lr0 must be > 0");
                }
                if !(decay > 0.0 && decay <= 1.0) {
                    return bad("decay must lie in (0, 1]");
                }
                if matches!(interval, Some(i) if !(i > 0.0)) {
                    return bad("interval must be > 0");
                }
            }
            ScheduleSpec::Warmup { scale_dim, warmup_steps } => {
                if warmup_steps < 1 {
                    return bad("warmup_steps must be >= 1");
                }
                if scale_dim == Some(0) {
                    return bad("scale_dim must be >= 1");
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Patch embedding (stand-in for the pretrained image backbone).
    pub backbone: ScheduleSpec,
    /// Positional table and patch self-attention layers.
    pub encoder: ScheduleSpec,
    /// Label embeddings, label-token layers and prediction head.
    pub decoder: ScheduleSpec,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            backbone: ScheduleSpec::ExpDecay {
                lr0: 5e-4,
                decay: 0.99,
                interval: None,
            },
            encoder: ScheduleSpec::Warmup {
                scale_dim: None,
                warmup_steps: 4000,
            },
            decoder: ScheduleSpec::Warmup {
                scale_dim: None,
                warmup_steps: 4000,
            },
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optim.beta1/beta2 must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optim.eps must be > 0 and weight_decay >= 0".into()));
        }
        self.backbone.validate("backbone")?;
        self.encoder.validate("encoder")?;
        self.decoder.validate("decoder")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training dataset directory.
    pub train: PathBuf,
    /// Held-out dataset directory used for best-checkpoint selection.
    pub valid: Option<PathBuf>,
    pub batch_size: usize,
    /// Beta(α, α) mixup; 0 disables mixup.
    pub mixup_alpha: f64,
    /// Standard deviation of additive Gaussian input noise; 0 disables it.
    pub aug_noise: f64,
    pub shuffle: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: PathBuf::from("data/train"),
            valid: None,
            batch_size: 32,
            mixup_alpha: 0.2,
            aug_noise: 0.0,
            shuffle: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Moving-mean window in frames.
    pub window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            window: 20,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("eval.threshold must lie in (0, 1)".into()));
        }
        if self.window < 1 {
            return Err(Error::Config("eval.window must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub epochs: u64,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    /// Seeds shuffling, dropout, mixup and augmentation noise.
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
    /// Validation interval in steps; `None` evaluates at each epoch end.
    pub eval_every: Option<u64>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            epochs: 10,
            max_steps: None,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            log_path: PathBuf::from("train_log.jsonl"),
            eval_every: None,
        }
    }
}

/// Complete training configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub run: RunSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.eval.validate()?;
        if self.data.batch_size == 0 {
            return Err(Error::Config("data.batch_size must be >= 1".into()));
        }
        if !(self.data.mixup_alpha >= 0.0) || !(self.data.aug_noise >= 0.0) {
            return Err(Error::Config("data.mixup_alpha and data.aug_noise must be >= 0".into()));
        }
        if self.run.epochs == 0 && self.run.max_steps.is_none() {
            return Err(Error::Config("run.epochs must be >= 1".into()));
        }
        if self.run.eval_every == Some(0) {
            return Err(Error::Config("run.eval_every must be >= 1".into()));
        }
        if let LabelWeights::Explicit(w) | LabelWeights::Rates(w) = &self.loss.weights {
            if w.len() != self.model.num_labels {
                return Err(Error::Config(format!(
                    "loss.weights has {} entries for L = {}",
                    w.len(),
                    self.model.num_labels
                )));
            }
        }
        Ok(())
    }

    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
