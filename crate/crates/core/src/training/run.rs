//! Phase selection for a single training job described by a config file.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::simtask_harness::{gen_dataset, Dataset, WorldSpec};

use super::phases::{train_phase1, train_phase2, TrainOutcome};
use super::{write_log_csv, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
    All,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("phase must be 1, 2 or all, got `{other}`"))),
        }
    }
}

impl TrainConfig {
    /// Like [`TrainConfig::load`], with relative paths taken from the config
    /// file's directory.
    pub fn load_resolved(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data, &mut cfg.phase1_checkpoint, &mut cfg.log_csv].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// The dataset named by `data`, else the inline `world`, else the
    /// default world.
    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.data, &self.world) {
            (Some(d), _) => Dataset::load(d),
            (None, Some(w)) => gen_dataset(w),
            (None, None) => gen_dataset(&WorldSpec::default()),
        }
    }
}

/// Runs the requested phases. Phase 2 alone starts from
/// `phase1_checkpoint`. The log of every phase run is returned (and written
/// to `log_csv` when set), also when training diverged.
pub fn run_training(ds: &Dataset, cfg: &TrainConfig, phase: Phase) -> Result<TrainOutcome> {
    cfg.validate()?;
    let outcome = match phase {
        Phase::One => train_phase1(ds, cfg)?,
        Phase::Two => {
            let path = cfg
                .phase1_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("phase 2 needs phase1_checkpoint".into()))?;
            train_phase2(ds, &ModelBundle::load(path)?, cfg)?
        }
        Phase::All => {
            let first = train_phase1(ds, cfg)?;
            if first.diverged.is_some() {
                first
            } else {
                let mut second = train_phase2(ds, &first.bundle, cfg)?;
                let mut log = first.log;
                log.append(&mut second.log);
                second.log = log;
                second
            }
        }
    };
    if let Some(path) = &cfg.log_csv {
        write_log_csv(&outcome.log, std::fs::File::create(path)?)?;
    }
    Ok(outcome)
}
