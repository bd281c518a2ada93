//! ELBO objective, cyclic KL annealing with a loss-gap freeze, and the
//! training loop shared by every stage.

mod checkpoint;
mod stages;
mod trainer;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

pub use checkpoint::{CheckpointMeta, CheckpointPaths, FORMAT_VERSION};
pub use trainer::{train_stage, MetricRecord, StageModel, TrainData, TrainReport};
pub(crate) use trainer::write_divergence_dump;

use crate::boxvae::{GaussianParams, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::{Error, Result};

/// `KL(N(mu, diag(exp(log_var))) || N(0, I))` per sample, `(B,)`.
pub fn kl_gaussian(g: &GaussianParams) -> Result<Tensor> {
    let lv = g.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?;
    let terms = (((lv.exp()? + g.mu.sqr()?)? - 1.0)? - &lv)?;
    Ok((terms.sum(D::Minus1)? * 0.5)?)
}

/// Minimized objective `mean(recon + lambda * kl)` over the batch.
pub fn elbo_loss(recon: &Tensor, kl: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok((recon + (kl * lambda)?)?.mean_all()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    BoxVae,
    LabelMapVae,
    BmVae,
    BsLstm,
    CgGan,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::BoxVae, Stage::LabelMapVae, Stage::BmVae, Stage::BsLstm, Stage::CgGan];

    pub fn name(self) -> &'static str {
        match self {
            Stage::BoxVae => "boxvae",
            Stage::LabelMapVae => "labelmapvae",
            Stage::BmVae => "bmvae",
            Stage::BsLstm => "bslstm",
            Stage::CgGan => "cggan",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Stage::BmVae | Stage::BsLstm | Stage::CgGan)
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adagrad,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealConfig {
    pub lambda_max: f64,
    /// Number of schedule cycles over a full run.
    pub cycles: usize,
    /// Validation-minus-training gap above which the KL weight freezes.
    pub threshold: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            lambda_max: 1.0,
            cycles: 4,
            threshold: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub anneal: AnnealConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Stage::BoxVae)
    }
}

impl TrainConfig {
    pub fn preset(stage: Stage) -> Self {
        let (learning_rate, epochs, batch_size, optimizer) = match stage {
            Stage::BoxVae => (1e-4, 300, 32, OptimizerKind::Adam),
            Stage::LabelMapVae | Stage::BmVae => (1e-3, 110, 8, OptimizerKind::Adam),
            Stage::BsLstm => (1e-5, 300, 32, OptimizerKind::Adam),
            Stage::CgGan => (1e-2, 110, 8, OptimizerKind::Adagrad),
        };
        TrainConfig {
            stage,
            learning_rate,
            epochs,
            batch_size,
            optimizer,
            seed: 0,
            anneal: AnnealConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.anneal.cycles == 0 || self.anneal.lambda_max < 0.0 || self.anneal.threshold < 0.0 {
            return Err(Error::Config(format!("invalid anneal settings {:?}", self.anneal)));
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `lambda_max` over the first half of each cycle,
/// then a hold at `lambda_max` for the second half.
pub fn cyclic_beta(step: usize, cycle_length: usize, lambda_max: f64) -> f64 {
    assert!(cycle_length > 0, "cycle length must be positive");
    let pos = (step % cycle_length) as f64;
    let half = cycle_length as f64 / 2.0;
    lambda_max * (pos / half).min(1.0)
}

/// KL weight schedule state. While frozen, both the weight and the schedule
/// clock are held, so the ramp resumes where it stopped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub step: usize,
    pub lambda: f64,
    pub cycle_length: usize,
    pub lambda_max: f64,
    pub frozen: bool,
    pub threshold: f64,
}

impl AnnealState {
    pub fn new(cycle_length: usize, lambda_max: f64, threshold: f64) -> Self {
        AnnealState {
            step: 0,
            lambda: cyclic_beta(0, cycle_length, lambda_max),
            cycle_length,
            lambda_max,
            frozen: false,
            threshold,
        }
    }

    /// Advances one optimizer step.
    pub fn tick(&mut self) {
        if !self.frozen {
            self.step += 1;
            self.lambda = cyclic_beta(self.step, self.cycle_length, self.lambda_max);
        }
    }
}

/// Freezes when `val_loss - train_loss` exceeds the threshold and releases
/// as soon as the gap is back at or below it.
pub fn freeze_gate(train_loss: f64, val_loss: f64, state: AnnealState) -> AnnealState {
    AnnealState {
        frozen: val_loss - train_loss > state.threshold,
        ..state
    }
}
