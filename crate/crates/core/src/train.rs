//! The training loop: minibatches with mixup and optional input noise,
//! AdamW updates with per-group schedules, periodic validation and
//! checkpoints.

use std::path::{Path, PathBuf};

use mlt_autodiff::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RunConfig};
use crate::data::{epoch_order, mixup, Batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{checkpoint_bytes, forward, predict, ModelParams};
use crate::objectives::{resolve_weights, total_loss};
use crate::optim::Optimizer;
use crate::util::atomic_write;
use crate::Ctx;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogEvent {
    Step {
        step: u64,
        lr_backbone: f64,
        lr_encoder: f64,
        lr_decoder: f64,
        bce: f64,
        dice: f64,
        total: f64,
    },
    Eval {
        step: u64,
        valid_macro_f1: f64,
        valid_macro_f1_smoothed: f64,
    },
}

pub const FINAL_CHECKPOINT: &str = "final.mltc";
pub const BEST_CHECKPOINT: &str = "best.mltc";

/// Samples per forward pass during validation.
pub const PREDICT_BATCH: usize = 64;

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogEvent>,
    pub steps: u64,
    /// Best smoothed validation macro F1 and its parameters.
    pub best: Option<(f64, ModelParams)>,
    pub last_eval: Option<EvalReport>,
}

/// Independent random streams derived from the run seed.
struct Streams {
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
    mixup: ChaCha8Rng,
    noise: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            shuffle: stream(1),
            dropout: stream(2),
            mixup: stream(3),
            noise: stream(4),
        }
    }
}

pub fn check_dataset(model: &ModelConfig, data: &Dataset, what: &str) -> Result<()> {
    data.validate()?;
    if data.n_x() != model.n_x || data.patch_dim() != model.patch_dim || data.num_labels() != model.num_labels {
        return Err(Error::ConfigMismatch(format!(
            "{what} dataset has n_x = {}, patch_dim = {}, L = {}; model expects {}, {}, {}",
            data.n_x(),
            data.patch_dim(),
            data.num_labels(),
            model.n_x,
            model.patch_dim,
            model.num_labels
        )));
    }
    Ok(())
}

pub fn steps_per_epoch(num_samples: usize, batch_size: usize) -> u64 {
    num_samples.div_ceil(batch_size.max(1)) as u64
}

fn augment(batch: Batch, cfg: &RunConfig, streams: &mut Streams) -> Result<Batch> {
    let mut batch = batch;
    let alpha = cfg.data.mixup_alpha;
    if alpha > 0.0 {
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup: {e}")))?;
        let lambda = beta.sample(&mut streams.mixup);
        let b = batch.x.shape()[0];
        let mut partner: Vec<usize> = (0..b).collect();
        partner.shuffle(&mut streams.mixup);
        let other = Batch {
            x: crate::util::take_rows(&batch.x, &partner)?,
            y: crate::util::take_rows(&batch.y, &partner)?,
            mask: crate::util::take_rows(&batch.mask, &partner)?,
        };
        batch = mixup(&batch, &other, lambda)?;
    }
    if cfg.data.aug_noise > 0.0 {
        let normal = Normal::new(0.0, cfg.data.aug_noise).map_err(|e| Error::Config(format!("aug_noise: {e}")))?;
        for v in batch.x.data_mut() {
            *v += normal.sample(&mut streams.noise);
        }
    }
    Ok(batch)
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::Tensor(mlt_autodiff::Error::NonFinite(op)) => Error::Diverged {
            step,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

/// Trains from freshly initialized parameters. `on_event` sees each log
/// line as it is produced.
pub fn train(
    cfg: &RunConfig,
    train_set: &Dataset,
    valid: Option<&Dataset>,
    on_event: &mut dyn FnMut(&LogEvent),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = ModelParams::init(&cfg.model)?;
    train_from(cfg, params, train_set, valid, on_event)
}

/// Trains starting from `params`.
pub fn train_from(
    cfg: &RunConfig,
    mut params: ModelParams,
    train_set: &Dataset,
    valid: Option<&Dataset>,
    on_event: &mut dyn FnMut(&LogEvent),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(&cfg.model, train_set, "training")?;
    if let Some(v) = valid {
        check_dataset(&cfg.model, v, "validation")?;
    }
    let weights = resolve_weights(&cfg.loss.weights, cfg.model.num_labels, Some(&train_set.positive_rates()))?;
    let n = train_set.num_samples();
    let bs = cfg.data.batch_size;
    let spe = steps_per_epoch(n, bs);
    let mut total_steps = cfg.run.epochs.saturating_mul(spe);
    if let Some(m) = cfg.run.max_steps {
        total_steps = if cfg.run.epochs == 0 { m } else { total_steps.min(m) };
    }
    let mut opt = Optimizer::new(&params, &cfg.model, &cfg.optim, spe)?;
    let mut streams = Streams::new(cfg.run.seed);
    let mut log = Vec::new();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut last_eval = None;
    let mut emit = |e: LogEvent, log: &mut Vec<LogEvent>| {
        on_event(&e);
        log.push(e);
    };

    let mut step = 0u64;
    'epochs: while step < total_steps {
        let order = epoch_order(n, cfg.data.shuffle, &mut streams.shuffle);
        for rows in order.chunks(bs) {
            if step >= total_steps {
                break 'epochs;
            }
            step += 1;
            let batch = augment(train_set.batch(rows)?, cfg, &mut streams)?;
            let (lrs, bce, dice, total) = (|| -> Result<_> {
                let mut tape = Tape::new();
                let pv = params.to_tape(&mut tape);
                let x = tape.constant(batch.x.clone());
                let mut ctx = Ctx::train(cfg.model.dropout, &mut streams.dropout);
                let p = forward(&mut tape, &pv, &cfg.model, x, &mut ctx)?;
                let parts = total_loss(&mut tape, &batch.y, &batch.mask, p, &weights, &cfg.loss)?;
                tape.backward(parts.total)?;
                let grads = pv.grads(&tape);
                if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
                    return Err(Error::Diverged {
                        step,
                        detail: format!("non-finite gradient for {}", params.names()[i]),
                    });
                }
                let vals = (
                    tape.value(parts.bce).item(),
                    tape.value(parts.dice).item(),
                    tape.value(parts.total).item(),
                );
                let lrs = opt.step(&mut params, &grads)?;
                Ok((lrs, vals.0, vals.1, vals.2))
            })()
            .map_err(|e| diverged(step, e))?;
            if !params.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: "parameters became non-finite".into(),
                });
            }
            emit(
                LogEvent::Step {
                    step,
                    lr_backbone: lrs.backbone,
                    lr_encoder: lrs.encoder,
                    lr_decoder: lrs.decoder,
                    bce,
                    dice,
                    total,
                },
                &mut log,
            );
            let end_of_epoch = step % spe == 0 || step == total_steps;
            let due = match cfg.run.eval_every {
                Some(k) => step % k == 0 || step == total_steps,
                None => end_of_epoch,
            };
            if let (Some(v), true) = (valid, due) {
                let probs = predict(&params, &cfg.model, &v.x, PREDICT_BATCH)?;
                let report = evaluate(&probs, v, cfg.eval.threshold, cfg.eval.window)?;
                let score = report.smoothed.macro_f1;
                emit(
                    LogEvent::Eval {
                        step,
                        valid_macro_f1: report.unsmoothed.macro_f1,
                        valid_macro_f1_smoothed: score,
                    },
                    &mut log,
                );
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, params.clone()));
                }
                last_eval = Some(report);
            }
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        steps: step,
        best,
        last_eval,
    })
}

/// Serializes log events as JSON lines.
pub fn log_text(log: &[LogEvent]) -> String {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e).expect("log events serialize"));
        out.push('\n');
    }
    out
}

/// Files written by [`run`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub steps: u64,
}

/// Loads the datasets named in `cfg`, trains, and writes the log and
/// checkpoints. Paths in `cfg` are resolved against `base`. Nothing is
/// written unless training succeeds.
pub fn run(cfg: &RunConfig, base: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let train_set = Dataset::load(&resolve(&cfg.data.train))?;
    let valid = cfg.data.valid.as_ref().map(|p| Dataset::load(&resolve(p))).transpose()?;
    let outcome = train(cfg, &train_set, valid.as_ref(), &mut |_| {})?;

    let dir = resolve(&cfg.run.checkpoint_dir);
    let final_checkpoint = dir.join(FINAL_CHECKPOINT);
    let best_checkpoint = outcome.best.as_ref().map(|_| dir.join(BEST_CHECKPOINT));
    let log_path = resolve(&cfg.run.log_path);
    atomic_write(&final_checkpoint, &checkpoint_bytes(&outcome.params, &cfg.model))?;
    if let (Some(path), Some((_, p))) = (&best_checkpoint, &outcome.best) {
        atomic_write(path, &checkpoint_bytes(p, &cfg.model))?;
    }
    atomic_write(&log_path, log_text(&outcome.log).as_bytes())?;
    Ok(RunArtifacts {
        log_path,
        final_checkpoint,
        best_checkpoint,
        steps: outcome.steps,
    })
}

/// Eval-mode probabilities for a whole dataset.
pub fn predict_dataset(params: &ModelParams, model: &ModelConfig, data: &Dataset) -> Result<Tensor> {
    check_dataset(model, data, "input")?;
    predict(params, model, &data.x, PREDICT_BATCH)
}

/// Loss of one batch with the given parameters and no augmentation, in
/// eval mode.
pub fn eval_loss(cfg: &RunConfig, params: &ModelParams, batch: &Batch, weights: &[f64]) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let pv = params.to_tape_constant(&mut tape);
    let x = tape.constant(batch.x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::eval(&mut rng);
    let p = forward(&mut tape, &pv, &cfg.model, x, &mut ctx)?;
    let parts = total_loss(&mut tape, &batch.y, &batch.mask, p, weights, &cfg.loss)?;
    Ok((
        tape.value(parts.bce).item(),
        tape.value(parts.dice).item(),
        tape.value(parts.total).item(),
    ))
}
