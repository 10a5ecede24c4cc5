//! Objectives and the training loop: the multi-task baseline, scheduled
//! sampling with Gumbel-Max selection, cross-modal KL regularization and
//! gap-weighted token losses.

mod loss;
mod optim;
mod sampling;
mod trainer;

pub use loss::{
    cress_loss, mt_loss, mtl_loss, token_weights, LossBreakdown, LossOutput,
};
pub use optim::{lr_schedule, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use sampling::{
    argmax, build_mixed_prefix, decay_probability, gumbel_noise, gumbel_select, MixedPrefix,
    SampleRecord, ScheduleState,
};
pub use trainer::{
    average_checkpoints, average_models, dev_bleu, train, EpochMetrics, TrainOutcome, TrainPaths,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Teacher-forced speech and text losses, summed.
    Mtl,
    /// Scheduled sampling, regularization and adaptive weights (each switchable).
    Cress,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mtl" => Ok(Mode::Mtl),
            "cress" => Ok(Mode::Cress),
            other => Err(Error::config("train.mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Decay parameter of the gold-word probability.
    pub mu: f64,
    /// Weight of the KL regularizer.
    pub lambda: f64,
    /// Lower bound of the adaptive token weight.
    pub weight_base: f64,
    /// Slope of the adaptive token weight in the gap.
    pub weight_scale: f64,
    /// Adaptive weights apply from the epoch after this one.
    pub adaptive_start_epoch: usize,
    pub scheduled_sampling: bool,
    pub regularization: bool,
    pub adaptive: bool,
    /// Reuse one Gumbel noise stream for both modalities.
    pub shared_gumbel: bool,
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub checkpoint_average_k: usize,
    /// Text-only epochs run before the main phase.
    pub pretrain_mt_epochs: usize,
    /// Padded token budget per batch.
    pub max_tokens: usize,
    /// Padded frame budget per batch.
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Mtl,
            mu: 15.0,
            lambda: 1.0,
            weight_base: 0.7,
            weight_scale: 0.05,
            adaptive_start_epoch: 5,
            scheduled_sampling: true,
            regularization: true,
            adaptive: true,
            shared_gumbel: false,
            max_lr: 3e-3,
            warmup_steps: 400,
            label_smoothing: 0.1,
            patience: 10,
            max_epochs: 20,
            checkpoint_average_k: 10,
            pretrain_mt_epochs: 0,
            max_tokens: 160,
            max_frames: 3200,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::config("train.mu", "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("train.lambda", "must be ≥ 0"));
        }
        if !(self.weight_base > 0.0 && self.weight_base.is_finite()) {
            return Err(Error::config("train.weight_base", "must be positive"));
        }
        if !(self.weight_scale >= 0.0 && self.weight_scale.is_finite()) {
            return Err(Error::config("train.weight_scale", "must be ≥ 0"));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::config("train.max_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("train.label_smoothing", "must lie in [0, 1)"));
        }
        let positive = [
            ("train.patience", self.patience),
            ("train.max_epochs", self.max_epochs),
            ("train.checkpoint_average_k", self.checkpoint_average_k),
            ("train.max_tokens", self.max_tokens),
            ("train.max_frames", self.max_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("train.warmup_steps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn sampling_on(&self) -> bool {
        self.mode == Mode::Cress && self.scheduled_sampling
    }

    /// Effective regularization weight (zero when switched off).
    pub fn reg_weight(&self) -> f64 {
        if self.mode == Mode::Cress && self.regularization {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn adaptive_active(&self, epoch: usize) -> bool {
        self.mode == Mode::Cress && self.adaptive && epoch > self.adaptive_start_epoch
    }
}
