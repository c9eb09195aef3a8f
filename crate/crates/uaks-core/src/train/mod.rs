//! Training: the masked weighted binary cross-entropy objective, learning
//! rate schedules, batch sampling and the pretrain/finetune loops.

mod batch;
mod optim;
mod run;

pub use batch::{sample_batch, Batch, BatchItem, SampleIndex};
pub use optim::{Adam, AdamConfig};
pub use run::{
    eval_loss_mean, finetune, pretrain, write_trace, FinetuneOutcome, PretrainOutcome, TraceRow,
};

use serde::{Deserialize, Serialize};

use crate::corpus::LabelVector;
use crate::error::{Error, Result};
use crate::model::PosteriorVector;

/// Counting convention for the mini-batch size fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchUnit {
    /// Batch counts (query, document) pairs; queries per step = batch / M.
    Pairs,
    /// Batch counts queries directly.
    Queries,
}

/// Objective hyper-parameters: tolerance phi, positive weight lambda and
/// documents per query M.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub phi: f64,
    pub lambda: f64,
    pub m: usize,
    pub l_batch: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            phi: 0.7,
            lambda: 5.0,
            m: 4,
            l_batch: 64,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.5 && self.phi <= 1.0) {
            return Err(Error::invalid(format!(
                "phi must lie in (0.5, 1], got {}",
                self.phi
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.m < 2 {
            return Err(Error::invalid(format!("M must be >= 2, got {}", self.m)));
        }
        if self.l_batch < 1 {
            return Err(Error::invalid("L_batch must be >= 1"));
        }
        Ok(())
    }
}

/// Cosine-decay pretraining schedule with linear warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSchedule {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch: usize,
    pub batch_unit: BatchUnit,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        PretrainSchedule {
            peak_lr: 5e-4,
            final_lr: 1e-7,
            total_steps: 200_000,
            warmup_steps: 10_000,
            batch: 256,
            batch_unit: BatchUnit::Pairs,
        }
    }
}

impl PretrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::invalid("warmup must be shorter than the total schedule"));
        }
        if self.final_lr > self.peak_lr {
            return Err(Error::invalid("final learning rate cannot exceed the peak"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        Ok(())
    }

    pub fn queries_per_step(&self, m: usize) -> usize {
        match self.batch_unit {
            BatchUnit::Pairs => (self.batch / m).max(1),
            BatchUnit::Queries => self.batch,
        }
    }
}

/// Step-decay finetuning schedule driven by validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSchedule {
    pub init_lr: f64,
    pub halve_patience: usize,
    pub stop_patience: usize,
    pub batch: usize,
    pub batch_unit: BatchUnit,
    pub validation_fraction: f64,
    pub max_epochs: usize,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        FinetuneSchedule {
            init_lr: 0.002,
            halve_patience: 4,
            stop_patience: 10,
            batch: 32,
            batch_unit: BatchUnit::Pairs,
            validation_fraction: 0.10,
            max_epochs: 200,
        }
    }
}

impl FinetuneSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.halve_patience < 1 || self.stop_patience < 1 {
            return Err(Error::invalid("patiences must be >= 1"));
        }
        if !(self.init_lr > 0.0) {
            return Err(Error::invalid("initial learning rate must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("validation fraction must lie in (0, 1)"));
        }
        if self.batch == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch size and max epochs must be >= 1"));
        }
        Ok(())
    }

    pub fn queries_per_step(&self, m: usize) -> usize {
        match self.batch_unit {
            BatchUnit::Pairs => (self.batch / m).max(1),
            BatchUnit::Queries => self.batch,
        }
    }
}

/// f(z, y) = -sum_n [ 1{z_n > 1-phi} (1-y_n) log(1-z_n)
///                  + 1{z_n < phi} lambda y_n log z_n ].
pub fn loss(z: &PosteriorVector, y: &LabelVector, cfg: &LossConfig) -> Result<f64> {
    if z.z.len() != y.values.len() {
        return Err(Error::dims("loss frame count", y.values.len(), z.z.len()));
    }
    cfg.validate()?;
    Ok(masked_bce(&z.z, &y.values, cfg))
}

pub(crate) fn masked_bce(z: &[f64], y: &[u8], cfg: &LossConfig) -> f64 {
    let mut total = 0.0;
    for (&zn, &yn) in z.iter().zip(y) {
        if yn == 0 && zn > 1.0 - cfg.phi {
            total -= (1.0 - zn).ln();
        } else if yn == 1 && zn < cfg.phi {
            total -= cfg.lambda * zn.ln();
        }
    }
    total
}

/// Per-frame dL/dz with the indicators treated as stop-gradient masks:
/// active negatives get 1/(1-z), active positives -lambda/z, masked
/// frames 0.
pub(crate) fn masked_dldz(z: &[f64], y: &[u8], cfg: &LossConfig) -> Vec<f64> {
    z.iter()
        .zip(y)
        .map(|(&zn, &yn)| {
            if yn == 0 && zn > 1.0 - cfg.phi {
                1.0 / (1.0 - zn)
            } else if yn == 1 && zn < cfg.phi {
                -cfg.lambda / zn
            } else {
                0.0
            }
        })
        .collect()
}

/// Margin around the masking boundaries inside which the gradient is not
/// defined for checking purposes.
pub const MASK_BOUNDARY_MARGIN: f64 = 1e-3;

pub fn loss_gradient(z: &PosteriorVector, y: &LabelVector, cfg: &LossConfig) -> Result<Vec<f64>> {
    if z.z.len() != y.values.len() {
        return Err(Error::dims("gradient frame count", y.values.len(), z.z.len()));
    }
    cfg.validate()?;
    for (n, &zn) in z.z.iter().enumerate() {
        if (zn - cfg.phi).abs() < MASK_BOUNDARY_MARGIN
            || (zn - (1.0 - cfg.phi)).abs() < MASK_BOUNDARY_MARGIN
        {
            return Err(Error::invalid(format!(
                "z[{n}] = {zn} is within {MASK_BOUNDARY_MARGIN} of a masking boundary; resample"
            )));
        }
    }
    Ok(masked_dldz(&z.z, &y.values, cfg))
}

/// Linear warmup to the peak rate, then cosine decay to the final rate.
pub fn cosine_lr(step: usize, sched: &PretrainSchedule) -> Result<f64> {
    sched.validate()?;
    if step > sched.total_steps {
        return Err(Error::invalid(format!(
            "step {step} outside the schedule of {} steps",
            sched.total_steps
        )));
    }
    if step <= sched.warmup_steps {
        if sched.warmup_steps == 0 {
            return Ok(sched.peak_lr);
        }
        return Ok(sched.peak_lr * step as f64 / sched.warmup_steps as f64);
    }
    let progress =
        (step - sched.warmup_steps) as f64 / (sched.total_steps - sched.warmup_steps) as f64;
    Ok(sched.final_lr
        + 0.5 * (sched.peak_lr - sched.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Tracks validation loss for the finetuning step-decay rule.
#[derive(Debug, Clone)]
pub struct StepDecayController {
    best: Option<f64>,
    since_improve_halve: usize,
    since_improve_stop: usize,
    halve_patience: usize,
    stop_patience: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayDecision {
    Improved,
    Continue,
    Halve,
    Stop,
}

impl StepDecayController {
    pub fn new(halve_patience: usize, stop_patience: usize) -> Self {
        StepDecayController {
            best: None,
            since_improve_halve: 0,
            since_improve_stop: 0,
            halve_patience,
            stop_patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> DecayDecision {
        let improved = self.best.is_none_or(|b| val_loss < b - 1e-12);
        if improved {
            self.best = Some(val_loss);
            self.since_improve_halve = 0;
            self.since_improve_stop = 0;
            return DecayDecision::Improved;
        }
        self.since_improve_halve += 1;
        self.since_improve_stop += 1;
        if self.since_improve_stop >= self.stop_patience {
            return DecayDecision::Stop;
        }
        if self.since_improve_halve >= self.halve_patience {
            self.since_improve_halve = 0;
            return DecayDecision::Halve;
        }
        DecayDecision::Continue
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Deterministic sub-seed derivation independent of thread scheduling.
pub(crate) fn derive_seed(base: u64, tag: u64, idx: u64) -> u64 {
    splitmix64(base ^ splitmix64(tag ^ splitmix64(idx)))
}
