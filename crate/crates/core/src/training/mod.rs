//! Losses, the two-phase training loop and numerical checks of the
//! variational bounds behind the rate term.

mod bounds;
mod losses;
mod phases;
mod run;

pub use bounds::{entropy_chain, verify_variational_bound, BoundReport};
pub use losses::{
    loss_l1, loss_l2, loss_l3, DeviceGrads, L1Example, Phase1Grads,
};
pub use phases::{arch_for, cache_features, fusion_slots, mean_l1, train_phase1, train_phase2, TrainOutcome};
pub use run::{run_training, Phase};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simtask_harness::WorldSpec;

/// Training hyperparameters. Also the schema of `train` config files, which
/// may add a dataset location (`data`) or an inline `[world]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the rate term, in nats per bit.
    pub beta: f64,
    /// Rate floor in bits per frame; below it the rate term is constant.
    pub r_bit: f64,
    pub tau1: usize,
    pub tau2: usize,
    /// `w_0..w_tau1`; empty means all ones.
    pub weights: Vec<f64>,
    pub batch_size: usize,
    pub steps_phase1: usize,
    pub steps_phase2: usize,
    pub lr: f64,
    pub seed: u64,
    pub train_frames: usize,
    pub val_frames: usize,
    pub feature_channels: usize,
    pub hyper_channels: usize,
    pub hidden_channels: usize,
    pub head_channels: usize,
    pub log_every: usize,
    pub data: Option<PathBuf>,
    pub world: Option<WorldSpec>,
    /// Phase-1 checkpoint consumed by phase 2.
    pub phase1_checkpoint: Option<PathBuf>,
    pub log_csv: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 2e-3,
            r_bit: 0.0,
            tau1: 1,
            tau2: 1,
            weights: Vec::new(),
            batch_size: 8,
            steps_phase1: 1500,
            steps_phase2: 1000,
            lr: 2e-3,
            seed: 1,
            train_frames: 2000,
            val_frames: 200,
            feature_channels: 8,
            hyper_channels: 4,
            hidden_channels: 16,
            head_channels: 6,
            log_every: 50,
            data: None,
            world: None,
            phase1_checkpoint: None,
            log_csv: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn weights(&self) -> Vec<f64> {
        if self.weights.is_empty() {
            vec![1.0; self.tau1 + 1]
        } else {
            self.weights.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.r_bit >= 0.0 && self.r_bit.is_finite()) {
            return bad("r_bit must be non-negative");
        }
        if !self.weights.is_empty() && self.weights.len() != self.tau1 + 1 {
            return Err(Error::Config(format!(
                "expected {} weights for tau1 = {}, got {}",
                self.tau1 + 1,
                self.tau1,
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad("weights must be positive");
        }
        if self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("batch_size and lr must be positive");
        }
        if self.train_frames <= self.tau1.max(self.tau2) {
            return bad("train_frames must exceed the temporal windows");
        }
        if self.data.is_some() && self.world.is_some() {
            return bad("give either data or world, not both");
        }
        if let Some(w) = &self.world {
            w.validate()?;
        }
        Ok(())
    }
}

/// Terms of the phase-1 objective for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub distortion_nats: f64,
    pub rate_bits: f64,
    /// `max(rate_bits, r_bit)`.
    pub rate_term: f64,
    /// `distortion_nats + beta * rate_term`.
    pub total: f64,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub phase: u8,
    pub loss_total: f64,
    pub distortion_nats: f64,
    pub rate_bits: f64,
    pub lr: f64,
    pub seed: u64,
}

pub fn write_log_csv<W: std::io::Write>(rows: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
