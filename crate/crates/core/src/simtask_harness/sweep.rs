//! Grids of training configurations evaluated on the held-out frames.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::pipeline::ModePolicy;
use crate::training::{train_phase1, train_phase2, TrainConfig};

use super::eval::{evaluate_run, write_records_csv, EvalOptions, RateDistortionRecord};
use super::world::{gen_dataset, Dataset, WorldSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub id: String,
    pub tau1: usize,
    pub tau2: usize,
    pub beta: f64,
    #[serde(default)]
    pub r_bit: f64,
    /// Offsets covered by the phase-1 auxiliary heads; defaults to the base
    /// config's `tau1`. Points that agree on it (and on beta, r_bit and
    /// seed) share one phase-1 run.
    #[serde(default)]
    pub aux_tau: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub seeds: Vec<u64>,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_bps: f64,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub world: Option<WorldSpec>,
    /// Train missing models inline instead of loading checkpoints.
    #[serde(default)]
    pub train: bool,
    /// Holds `{id}_s{seed}.tocp`; read when not training, written when
    /// training.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub base: TrainConfig,
    pub point: Vec<GridPoint>,
}

fn default_bandwidth() -> f64 {
    1e6
}

impl SweepGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut g = Self::from_toml(&std::fs::read_to_string(path)?)?;
        // Relative paths are taken from the grid file's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut g.data, &mut g.checkpoint_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.point.is_empty() {
            return Err(Error::Config("a sweep needs at least one seed and one point".into()));
        }
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(Error::Config("bandwidth_bps must be positive".into()));
        }
        if self.data.is_some() && self.world.is_some() {
            return Err(Error::Config("give either data or world, not both".into()));
        }
        if !self.train && self.checkpoint_dir.is_none() {
            return Err(Error::Config("without training a checkpoint_dir is required".into()));
        }
        let mut ids: Vec<&str> = self.point.iter().map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("grid point ids must be unique".into()));
        }
        for p in &self.point {
            self.phase1_config(p, self.seeds[0]).validate()?;
            self.phase2_config(p, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.data, &self.world) {
            (Some(d), _) => Dataset::load(d),
            (None, Some(w)) => gen_dataset(w),
            (None, None) => gen_dataset(&WorldSpec::default()),
        }
    }

    fn aux_tau(&self, p: &GridPoint) -> usize {
        p.aux_tau.unwrap_or(self.base.tau1)
    }

    pub fn phase1_config(&self, p: &GridPoint, seed: u64) -> TrainConfig {
        let aux_tau = self.aux_tau(p);
        TrainConfig {
            beta: p.beta,
            r_bit: p.r_bit,
            tau1: aux_tau,
            tau2: p.tau2,
            seed,
            weights: if self.base.weights.len() == aux_tau + 1 {
                self.base.weights.clone()
            } else {
                Vec::new()
            },
            data: None,
            world: None,
            ..self.base.clone()
        }
    }

    pub fn phase2_config(&self, p: &GridPoint, seed: u64) -> TrainConfig {
        TrainConfig {
            tau1: p.tau1,
            weights: Vec::new(),
            ..self.phase1_config(p, seed)
        }
    }

    pub fn checkpoint_path(&self, p: &GridPoint, seed: u64) -> Option<PathBuf> {
        self.checkpoint_dir.as_ref().map(|d| d.join(format!("{}_s{seed}.tocp", p.id)))
    }
}

/// Test frames follow the training and validation frames.
pub fn held_out(ds: &Dataset, cfg: &TrainConfig) -> std::ops::Range<usize> {
    (cfg.train_frames + cfg.val_frames).min(ds.frames)..ds.frames
}

/// Phase-1 runs are shared between points that only differ in their
/// phase-2 settings.
type Phase1Key = (u64, u64, u64, usize);

fn phase1_key(grid: &SweepGrid, p: &GridPoint, seed: u64) -> Phase1Key {
    (seed, p.beta.to_bits(), p.r_bit.to_bits(), grid.aux_tau(p))
}

fn train_point(grid: &SweepGrid, ds: &Dataset, p: &GridPoint, seed: u64, phase1: &ModelBundle) -> Result<ModelBundle> {
    let (bundle, _) = train_phase2(ds, phase1, &grid.phase2_config(p, seed))?.into_result()?;
    if let Some(path) = grid.checkpoint_path(p, seed) {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        bundle.save(path)?;
    }
    Ok(bundle)
}

fn evaluate_point(grid: &SweepGrid, ds: &Dataset, p: &GridPoint, seed: u64, bundle: &ModelBundle) -> Result<RateDistortionRecord> {
    let cfg = grid.phase2_config(p, seed);
    let opts = EvalOptions {
        config_id: p.id.clone(),
        seed,
        beta: p.beta,
        r_bit: p.r_bit,
        policy: ModePolicy::Auto,
        bandwidth_bps: grid.bandwidth_bps,
        ..EvalOptions::default()
    };
    evaluate_run(bundle, ds, held_out(ds, &cfg), &opts)
}

fn load_point(grid: &SweepGrid, p: &GridPoint, seed: u64) -> Result<ModelBundle> {
    let path = grid
        .checkpoint_path(p, seed)
        .ok_or_else(|| Error::MissingCheckpoint(p.id.clone()))?;
    match ModelBundle::load(&path) {
        Err(Error::CheckpointNotFound(_)) => Err(Error::MissingCheckpoint(p.id.clone())),
        other => other,
    }
}

/// One record per (point, seed), in grid order then seed order.
pub fn run_sweep_on(grid: &SweepGrid, ds: &Dataset) -> Result<Vec<RateDistortionRecord>> {
    grid.validate()?;
    let jobs: Vec<(usize, u64)> = (0..grid.point.len())
        .flat_map(|i| grid.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let mut results: BTreeMap<(usize, usize), RateDistortionRecord> = BTreeMap::new();
    if grid.train {
        let mut groups: BTreeMap<Phase1Key, Vec<(usize, u64)>> = BTreeMap::new();
        for &(i, s) in &jobs {
            groups.entry(phase1_key(grid, &grid.point[i], s)).or_default().push((i, s));
        }
        let groups: Vec<Vec<(usize, u64)>> = groups.into_values().collect();
        let done: Vec<Vec<((usize, u64), RateDistortionRecord)>> = groups
            .par_iter()
            .map(|members| {
                let (i0, s0) = members[0];
                let cfg1 = grid.phase1_config(&grid.point[i0], s0);
                let (phase1, _) = train_phase1(ds, &cfg1)?.into_result()?;
                members
                    .iter()
                    .map(|&(i, s)| {
                        let p = &grid.point[i];
                        let bundle = train_point(grid, ds, p, s, &phase1)?;
                        Ok(((i, s), evaluate_point(grid, ds, p, s, &bundle)?))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for ((i, s), r) in done.into_iter().flatten() {
            results.insert((i, seed_index(grid, s)), r);
        }
    } else {
        let done: Vec<((usize, u64), RateDistortionRecord)> = jobs
            .par_iter()
            .map(|&(i, s)| {
                let p = &grid.point[i];
                let bundle = load_point(grid, p, s)?;
                Ok(((i, s), evaluate_point(grid, ds, p, s, &bundle)?))
            })
            .collect::<Result<_>>()?;
        for ((i, s), r) in done {
            results.insert((i, seed_index(grid, s)), r);
        }
    }
    Ok(results.into_values().collect())
}

fn seed_index(grid: &SweepGrid, seed: u64) -> usize {
    grid.seeds.iter().position(|&s| s == seed).expect("seed from the grid")
}

pub fn run_sweep(grid: &SweepGrid) -> Result<Vec<RateDistortionRecord>> {
    run_sweep_on(grid, &grid.dataset()?)
}

pub fn sweep_csv(records: &[RateDistortionRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_records_csv(records, &mut buf)?;
    Ok(buf)
}
