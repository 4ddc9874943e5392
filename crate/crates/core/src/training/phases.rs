//! Two-phase training loop: features, hyperprior and auxiliary heads first,
//! then temporal entropy models and the fusion head on frozen features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{adam_step, OptState};
use crate::error::{Error, Result};
use crate::inference::FusionInput;
use crate::model::{params_to_prior, prior_to_params, Arch, ModelBundle};
use crate::quantizer::{round_nearest, QuantizedFeature};
use crate::simtask_harness::Dataset;

use super::losses::{loss_l1, loss_l2, loss_l3, L1Example};
use super::{LogRow, LossReport, TrainConfig};

/// Trained models plus the log. `diverged` is set when a non-finite loss or
/// gradient stopped training early; `bundle` is then the last good state.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<LogRow>,
    pub diverged: Option<String>,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<(ModelBundle, Vec<LogRow>)> {
        match self.diverged {
            Some(what) => Err(Error::Diverged {
                step: self.log.last().map_or(0, |r| r.step),
                what,
            }),
            None => Ok((self.bundle, self.log)),
        }
    }
}

pub fn arch_for(ds: &Dataset, cfg: &TrainConfig) -> Arch {
    Arch {
        cameras: ds.cameras,
        height: ds.height,
        width: ds.width,
        feature_channels: cfg.feature_channels,
        hyper_channels: cfg.hyper_channels,
        hidden_channels: cfg.hidden_channels,
        head_channels: cfg.head_channels,
        grid: ds.grid,
        aux_tau: cfg.tau1,
        tau1: cfg.tau1,
        tau2: 0,
        views: ds.views.clone(),
    }
}

fn check_split(ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if cfg.train_frames > ds.frames {
        return Err(Error::Config(format!(
            "train_frames {} exceeds the {} frames in the dataset",
            cfg.train_frames, ds.frames
        )));
    }
    Ok(())
}

fn l1_example(ds: &Dataset, t: usize, tau1: usize) -> L1Example {
    L1Example {
        frames: (0..ds.cameras).map(|k| ds.frame_tensor(t, k)).collect(),
        targets: (0..=tau1).map(|tau| ds.truth_f64(t + tau)).collect(),
    }
}

/// Phase-1 loss averaged over the given start frames with fixed noise.
pub fn mean_l1(bundle: &ModelBundle, ds: &Dataset, cfg: &TrainConfig, frames: &[usize], seed: u64) -> Result<LossReport> {
    let batch: Vec<L1Example> = frames.iter().map(|&t| l1_example(ds, t, cfg.tau1)).collect();
    Ok(loss_l1(bundle, &batch, cfg, &mut ChaCha8Rng::seed_from_u64(seed))?.0)
}

fn log_due(step: usize, total: usize, every: usize) -> bool {
    step == 0 || step + 1 == total || (every > 0 && step.is_multiple_of(every))
}

pub fn train_phase1(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_split(ds, cfg)?;
    let mut bundle = ModelBundle::init(arch_for(ds, cfg), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5048_4153_4531);
    let lr = cfg.lr;
    let mut opt_dev: Vec<[OptState; 4]> = bundle
        .devices
        .iter()
        .map(|d| {
            Ok([
                OptState::new(&d.extractor.params, lr),
                OptState::new(&d.hyper.encoder.params, lr),
                OptState::new(&d.hyper.decoder.params, lr),
                OptState::new(&prior_to_params(&d.hyper.prior)?, lr),
            ])
        })
        .collect::<Result<_>>()?;
    let mut opt_aux: Vec<OptState> = bundle.aux.iter().map(|a| OptState::new(&a.params, lr)).collect();
    let mut log = Vec::new();
    let last_start = cfg.train_frames - cfg.tau1;
    for step in 0..cfg.steps_phase1 {
        let batch: Vec<L1Example> = (0..cfg.batch_size)
            .map(|_| l1_example(ds, rng.random_range(0..last_start), cfg.tau1))
            .collect();
        let (rep, grads) = match loss_l1(&bundle, &batch, cfg, &mut rng) {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => return Ok(diverged(bundle, log, step, what)),
            Err(e) => return Err(e),
        };
        if !grads.all_finite() {
            return Ok(diverged(bundle, log, step, "phase-1 gradients".into()));
        }
        for ((dev, g), opt) in bundle.devices.iter_mut().zip(&grads.devices).zip(&mut opt_dev) {
            adam_step(&mut dev.extractor.params, &g.extractor, &mut opt[0])?;
            adam_step(&mut dev.hyper.encoder.params, &g.hyper_enc, &mut opt[1])?;
            adam_step(&mut dev.hyper.decoder.params, &g.hyper_dec, &mut opt[2])?;
            let mut prior = prior_to_params(&dev.hyper.prior)?;
            adam_step(&mut prior, &g.prior, &mut opt[3])?;
            dev.hyper.prior = params_to_prior(&prior, dev.hyper.prior.channels())?;
        }
        for ((net, g), opt) in bundle.aux.iter_mut().zip(&grads.aux).zip(&mut opt_aux) {
            adam_step(&mut net.params, g, opt)?;
        }
        if log_due(step, cfg.steps_phase1, cfg.log_every) {
            log.push(LogRow {
                step,
                phase: 1,
                loss_total: rep.total,
                distortion_nats: rep.distortion_nats,
                rate_bits: rep.rate_bits,
                lr,
                seed: cfg.seed,
            });
        }
    }
    Ok(TrainOutcome {
        bundle,
        log,
        diverged: None,
    })
}

fn diverged(bundle: ModelBundle, log: Vec<LogRow>, step: usize, what: String) -> TrainOutcome {
    TrainOutcome {
        bundle,
        log,
        diverged: Some(format!("{what} at step {step}")),
    }
}

/// Hard-quantized features of every frame, `[t][k]`, stamped with
/// timestamps `t + 1`.
pub fn cache_features(bundle: &ModelBundle, ds: &Dataset) -> Result<Vec<Vec<QuantizedFeature>>> {
    (0..ds.frames)
        .map(|t| {
            bundle
                .devices
                .iter()
                .enumerate()
                .map(|(k, d)| {
                    Ok(round_nearest(&d.extractor.forward(&ds.frame_tensor(t, k))?)?
                        .stamped(k as u16, t as u32 + 1))
                })
                .collect()
        })
        .collect()
}

/// Fusion slots for frame `t` of a cached sequence starting at `start`:
/// offsets reaching before `start` are empty.
pub fn fusion_slots(
    cache: &[Vec<QuantizedFeature>],
    start: usize,
    t: usize,
    tau1: usize,
) -> Vec<Vec<Option<&QuantizedFeature>>> {
    let cameras = cache[t].len();
    (0..cameras)
        .map(|k| {
            (0..=tau1)
                .map(|o| (t >= start + o).then(|| &cache[t - o][k]))
                .collect()
        })
        .collect()
}

pub fn train_phase2(ds: &Dataset, phase1: &ModelBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_split(ds, cfg)?;
    let mut bundle = phase1.clone();
    bundle.init_phase2(cfg.tau1, cfg.tau2, cfg.seed)?;
    let cache = cache_features(&bundle, ds)?;
    let lr = cfg.lr;
    let fusion_net = bundle.fusion.as_mut().expect("phase 2 attaches a fusion head");
    let mut opt_fusion = OptState::new(&fusion_net.params, lr);
    let mut opt_temporal: Vec<Option<OptState>> = bundle
        .devices
        .iter()
        .map(|d| d.temporal.as_ref().map(|t| OptState::new(&t.transform.params, lr)))
        .collect();
    // One stream per task so each device's temporal training is independent.
    let mut rng_fusion = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4655_5349_4f4e);
    let mut rng_dev: Vec<ChaCha8Rng> = (0..bundle.devices.len())
        .map(|k| ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5445_4d00 + k as u64)))
        .collect();
    let mut log = Vec::new();
    for step in 0..cfg.steps_phase2 {
        let mut rate_bits = 0.0;
        for (k, dev) in bundle.devices.iter_mut().enumerate() {
            let (Some(temporal), Some(opt)) = (dev.temporal.as_mut(), opt_temporal[k].as_mut()) else {
                continue;
            };
            let order = temporal.order;
            let windows: Vec<Vec<&QuantizedFeature>> = (0..cfg.batch_size)
                .map(|_| {
                    let t = rng_dev[k].random_range(order..cfg.train_frames);
                    (t - order..=t).map(|s| &cache[s][k]).collect()
                })
                .collect();
            let (bits, g) = match loss_l2(temporal, &windows) {
                Ok(r) => r,
                Err(Error::NonFinite(what)) => return Ok(diverged(phase2_snapshot(phase1, &bundle), log, step, what)),
                Err(e) => return Err(e),
            };
            if !g.all_finite() {
                return Ok(diverged(phase2_snapshot(phase1, &bundle), log, step, "temporal gradients".into()));
            }
            adam_step(&mut temporal.transform.params, &g, opt)?;
            rate_bits += bits;
        }
        let fusion = bundle.fusion.as_mut().expect("attached above");
        let batch: Vec<(FusionInput, Vec<f64>)> = (0..cfg.batch_size)
            .map(|_| {
                let t = rng_fusion.random_range(0..cfg.train_frames);
                Ok((
                    FusionInput::assemble(&fusion_slots(&cache, 0, t, cfg.tau1))?,
                    ds.truth_f64(t),
                ))
            })
            .collect::<Result<_>>()?;
        let (nats, g) = match loss_l3(fusion, &batch) {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => return Ok(diverged(phase2_snapshot(phase1, &bundle), log, step, what)),
            Err(e) => return Err(e),
        };
        if !g.all_finite() {
            return Ok(diverged(phase2_snapshot(phase1, &bundle), log, step, "fusion gradients".into()));
        }
        adam_step(&mut fusion.params, &g, &mut opt_fusion)?;
        if log_due(step, cfg.steps_phase2, cfg.log_every) {
            log.push(LogRow {
                step,
                phase: 2,
                loss_total: nats + rate_bits,
                distortion_nats: nats,
                rate_bits,
                lr,
                seed: cfg.seed,
            });
        }
    }
    Ok(TrainOutcome {
        bundle,
        log,
        diverged: None,
    })
}

/// Phase-2 state at a failure: already-finished temporal updates are kept
/// because each adam step validates its gradients before applying them.
fn phase2_snapshot(_phase1: &ModelBundle, current: &ModelBundle) -> ModelBundle {
    current.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simtask_harness::{gen_dataset, WorldSpec};

    fn toy() -> (Dataset, TrainConfig) {
        let ds = gen_dataset(&WorldSpec {
            frames: 200,
            height: 16,
            width: 16,
            grid: 6,
            blob_radius: 1.2,
            ..WorldSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            train_frames: 160,
            val_frames: 20,
            steps_phase1: 120,
            steps_phase2: 60,
            batch_size: 4,
            feature_channels: 4,
            hyper_channels: 2,
            hidden_channels: 6,
            head_channels: 3,
            lr: 3e-3,
            log_every: 20,
            ..TrainConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn phase1_lowers_the_loss_and_is_deterministic() {
        let (ds, cfg) = toy();
        let frames: Vec<usize> = (0..159).step_by(3).collect();
        let init = ModelBundle::init(arch_for(&ds, &cfg), cfg.seed).unwrap();
        let before = mean_l1(&init, &ds, &cfg, &frames, 5).unwrap();
        let out = train_phase1(&ds, &cfg).unwrap();
        assert!(out.diverged.is_none());
        let after = mean_l1(&out.bundle, &ds, &cfg, &frames, 5).unwrap();
        assert!(after.total < before.total, "{} -> {}", before.total, after.total);
        assert_eq!(out.log.first().unwrap().step, 0);
        assert_eq!(out.log.last().unwrap().step, cfg.steps_phase1 - 1);
        let again = train_phase1(&ds, &cfg).unwrap();
        assert_eq!(
            again.bundle.to_checkpoint().unwrap().to_bytes().unwrap(),
            out.bundle.to_checkpoint().unwrap().to_bytes().unwrap()
        );
    }

    #[test]
    fn phase2_leaves_phase1_parameters_untouched() {
        let (ds, cfg) = toy();
        let p1 = train_phase1(&ds, &TrainConfig { steps_phase1: 10, ..cfg.clone() }).unwrap().bundle;
        let out = train_phase2(&ds, &p1, &cfg).unwrap();
        assert!(out.diverged.is_none());
        let b = &out.bundle;
        for (a, z) in p1.devices.iter().zip(&b.devices) {
            assert_eq!(a.extractor, z.extractor);
            assert_eq!(a.hyper, z.hyper);
            assert!(z.temporal.is_some());
        }
        assert_eq!(p1.aux, b.aux);
        assert!(b.fusion.is_some());
        assert!(out.log.iter().all(|r| r.phase == 2));
    }

    #[test]
    fn divergence_keeps_last_good_models() {
        let (ds, cfg) = toy();
        let cfg = TrainConfig {
            lr: 1e300,
            steps_phase1: 5,
            ..cfg
        };
        let out = train_phase1(&ds, &cfg).unwrap();
        assert!(out.diverged.is_some());
        assert!(out.bundle.to_checkpoint().unwrap().entries.values().all(|t| t.all_finite()));
        assert!(matches!(out.into_result(), Err(Error::Diverged { .. })));
    }

    #[test]
    fn fusion_slots_zero_fill_only_at_start() {
        let (ds, cfg) = toy();
        let b = ModelBundle::init(arch_for(&ds, &cfg), 1).unwrap();
        let small = Dataset {
            frames: 3,
            images: ds.images[..3 * 2 * 256].to_vec(),
            truth: ds.truth[..3 * 36].to_vec(),
            ..ds
        };
        let cache = cache_features(&b, &small).unwrap();
        let s0 = fusion_slots(&cache, 0, 0, 2);
        assert!(s0[0][0].is_some() && s0[0][1].is_none() && s0[1][2].is_none());
        let s2 = fusion_slots(&cache, 0, 2, 2);
        assert!(s2.iter().all(|d| d.iter().all(Option::is_some)));
        assert_eq!(s2[1][2].unwrap().timestamp, 1);
        assert!(fusion_slots(&cache, 1, 2, 2)[0][2].is_none());
    }
}
