//! AdamW with decoupled weight decay and the per-group learning-rate
//! schedules.

use mlt_autodiff::Tensor;
use serde::Serialize;

use crate::config::{ModelConfig, OptimConfig, ScheduleSpec};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGroup};

/// `lr0 · decay^(step / interval)` with a continuous exponent.
pub fn lr_exp_decay(step: f64, lr0: f64, decay: f64, interval: f64) -> f64 {
    lr0 * decay.powf(step / interval)
}

/// `scale_dim^-0.5 · min(step^-0.5, step · warmup_steps^-1.5)` for `step ≥ 1`.
pub fn lr_warmup(step: u64, scale_dim: usize, warmup_steps: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("warmup schedule is defined for step >= 1".into()));
    }
    if scale_dim == 0 || warmup_steps == 0 {
        return Err(Error::Config("warmup schedule needs scale_dim, warmup_steps >= 1".into()));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok((scale_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// A schedule with every default filled in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    ExpDecay { lr0: f64, decay: f64, interval: f64 },
    Warmup { scale_dim: usize, warmup_steps: u64 },
}

impl Schedule {
    /// Fills in the group-dependent defaults: one epoch for the decay
    /// interval, `n_x` (encoder) or `L` (decoder) for the warmup scale.
    pub fn resolve(spec: &ScheduleSpec, group: ParamGroup, model: &ModelConfig, steps_per_epoch: u64) -> Result<Self> {
        spec.validate(group.name())?;
        Ok(match *spec {
            ScheduleSpec::ExpDecay { lr0, decay, interval } => Schedule::ExpDecay {
                lr0,
                decay,
                interval: interval.unwrap_or(steps_per_epoch.max(1) as f64),
            },
            ScheduleSpec::Warmup { scale_dim, warmup_steps } => Schedule::Warmup {
                scale_dim: scale_dim.unwrap_or(match group {
                    ParamGroup::Decoder => model.num_labels,
                    _ => model.n_x,
                }),
                warmup_steps,
            },
        })
    }

    /// Learning rate for the `update`-th optimizer update (1-based). The
    /// decay schedule starts at step 0, the warmup schedule at step 1.
    pub fn lr(&self, update: u64) -> Result<f64> {
        if update == 0 {
            return Err(Error::Config("optimizer updates are numbered from 1".into()));
        }
        match *self {
            Schedule::ExpDecay { lr0, decay, interval } => {
                Ok(lr_exp_decay((update - 1) as f64, lr0, decay, interval))
            }
            Schedule::Warmup { scale_dim, warmup_steps } => lr_warmup(update, scale_dim, warmup_steps),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl From<&OptimConfig> for AdamWParams {
    fn from(c: &OptimConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// First and second moment estimates for a list of tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hp: AdamWParams,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(hp: AdamWParams, sizes: &[usize]) -> Self {
        Self {
            hp,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.m[i], &self.v[i])
    }

    fn advance(&mut self) {
        self.step += 1;
    }

    /// Moves tensor `i` using the bias corrections of the current step.
    fn update_one(&mut self, i: usize, theta: &mut [f64], g: &[f64], lr: f64) {
        let AdamWParams { beta1, beta2, eps, weight_decay } = self.hp;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        for (((th, &g), mi), vi) in theta.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *th -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *th);
        }
    }

    /// One update of every tensor; `lrs[i]` is the learning rate of tensor
    /// `i`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || lrs.len() != n {
            return Err(Error::Shape {
                op: "adamw_step",
                expected: vec![n],
                actual: vec![params.len(), grads.len(), lrs.len()],
            });
        }
        for i in 0..n {
            if params[i].shape() != grads[i].shape() || params[i].numel() != self.m[i].len() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    expected: params[i].shape().to_vec(),
                    actual: grads[i].shape().to_vec(),
                });
            }
            if !(lrs[i] > 0.0) {
                return Err(Error::Config(format!("learning rate {} must be > 0", lrs[i])));
            }
        }
        self.advance();
        for i in 0..n {
            self.update_one(i, params[i].data_mut(), grads[i].data(), lrs[i]);
        }
        Ok(())
    }
}

/// Learning rates of the three groups at one update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GroupLrs {
    pub backbone: f64,
    pub encoder: f64,
    pub decoder: f64,
}

impl GroupLrs {
    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Decoder => self.decoder,
        }
    }
}

/// One row of the optimizer's group table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupEntry {
    pub name: String,
    pub group: ParamGroup,
    pub schedule: Schedule,
}

/// AdamW over a model's parameters with per-group schedules.
#[derive(Clone, Debug)]
pub struct Optimizer {
    adam: AdamW,
    groups: Vec<ParamGroup>,
    names: Vec<String>,
    backbone: Schedule,
    encoder: Schedule,
    decoder: Schedule,
}

impl Optimizer {
    pub fn new(params: &ModelParams, model: &ModelConfig, cfg: &OptimConfig, steps_per_epoch: u64) -> Result<Self> {
        cfg.validate()?;
        let named = params.named();
        let sizes: Vec<usize> = named.iter().map(|(_, t)| t.numel()).collect();
        Ok(Self {
            adam: AdamW::new(cfg.into(), &sizes),
            groups: named.iter().map(|(n, _)| ParamGroup::of(n)).collect(),
            names: named.into_iter().map(|(n, _)| n).collect(),
            backbone: Schedule::resolve(&cfg.backbone, ParamGroup::Backbone, model, steps_per_epoch)?,
            encoder: Schedule::resolve(&cfg.encoder, ParamGroup::Encoder, model, steps_per_epoch)?,
            decoder: Schedule::resolve(&cfg.decoder, ParamGroup::Decoder, model, steps_per_epoch)?,
        })
    }

    pub fn schedule(&self, g: ParamGroup) -> Schedule {
        match g {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Decoder => self.decoder,
        }
    }

    /// Every parameter with its group and schedule.
    pub fn group_table(&self) -> Vec<GroupEntry> {
        self.names
            .iter()
            .zip(&self.groups)
            .map(|(n, &g)| GroupEntry {
                name: n.clone(),
                group: g,
                schedule: self.schedule(g),
            })
            .collect()
    }

    /// Learning rates for the `update`-th update (1-based).
    pub fn lrs(&self, update: u64) -> Result<GroupLrs> {
        Ok(GroupLrs {
            backbone: self.backbone.lr(update)?,
            encoder: self.encoder.lr(update)?,
            decoder: self.decoder.lr(update)?,
        })
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    /// Applies one update with gradients in canonical parameter order and
    /// returns the learning rates used.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<GroupLrs> {
        let lrs = self.lrs(self.adam.steps() + 1)?;
        let n = self.groups.len();
        if grads.len() != n {
            return Err(Error::Shape {
                op: "optimizer step",
                expected: vec![n],
                actual: vec![grads.len()],
            });
        }
        let mut bad = None;
        let mut i = 0;
        params.visit_mut(&mut |name, t| {
            if i >= n || t.shape() != grads[i].shape() {
                bad.get_or_insert(name);
            }
            i += 1;
        });
        if let Some(name) = bad.or_else(|| (i != n).then(|| "parameter count".to_string())) {
            return Err(Error::Config(format!("gradient does not match parameter {name}")));
        }
        self.adam.advance();
        let mut i = 0;
        params.visit_mut(&mut |_, t| {
            let lr = lrs.get(self.groups[i]);
            self.adam.update_one(i, t.data_mut(), grads[i].data(), lr);
            i += 1;
        });
        Ok(lrs)
    }
}
