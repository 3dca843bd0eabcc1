//! Multi-label transformer for frame-level multi-label detection.
//!
//! Encoded image patches go through self-attention layers; one learned token
//! per label then cross-attends to the encoded patches, and a shared linear
//! head with a sigmoid turns each label token into a probability.

pub mod attention;
pub mod blocks;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod objectives;
pub mod optim;
mod params;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use mlt_autodiff as autodiff;

use mlt_autodiff::{Tape, Var};
use rand::RngCore;

/// Forward-pass mode: sublayer dropout rate, train/eval flag and the
/// generator that draws dropout masks.
pub struct Ctx<'a> {
    pub training: bool,
    pub dropout: f64,
    pub rng: &'a mut dyn RngCore,
}

impl<'a> Ctx<'a> {
    pub fn train(dropout: f64, rng: &'a mut dyn RngCore) -> Self {
        Self {
            training: true,
            dropout,
            rng,
        }
    }

    pub fn eval(rng: &'a mut dyn RngCore) -> Self {
        Self {
            training: false,
            dropout: 0.0,
            rng,
        }
    }

    /// Applies sublayer dropout (identity in eval mode).
    pub fn drop(&mut self, tape: &mut Tape, v: Var) -> Result<Var> {
        Ok(tape.dropout(v, self.dropout, self.training, &mut *self.rng)?)
    }
}
