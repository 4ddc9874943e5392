//! Streaming evaluation of a trained bundle and of the pixel-codec baseline.

use std::ops::Range;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::entropy_models::gu_bits_map;
use crate::error::{Error, Result};
use crate::inference::{bce_distortion, bitmap_pgm, fuse_predict, moda_score, write_pgm, FusionInput, OccupancyGrid};
use crate::model::ModelBundle;
use crate::pipeline::{decode_frame, encode_frame_detailed, DeviceState, ModePolicy, ServerState, HEADER_LEN};
use crate::quantizer::{round_nearest, QuantizedFeature};
use crate::training::fusion_slots;

use super::baseline::baseline_encode_frame;
use super::world::{pixels_to_tensor, Dataset};

/// One point on a rate-performance curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateDistortionRecord {
    pub config_id: String,
    pub seed: u64,
    pub tau1: usize,
    pub tau2: usize,
    pub beta: f64,
    pub r_bit: f64,
    /// Mean transmitted bits per frame over all devices, headers included.
    pub bits_measured: f64,
    /// Mean model cross-entropy per frame plus the header bits.
    pub bits_estimated: f64,
    /// Mean summed per-cell BCE in nats.
    pub bce: f64,
    pub moda: f64,
    pub latency_ms: f64,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub config_id: String,
    pub seed: u64,
    pub beta: f64,
    pub r_bit: f64,
    pub policy: ModePolicy,
    pub bandwidth_bps: f64,
    pub threshold: f64,
    /// Directory for per-element bit-allocation maps.
    pub bitmap_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            config_id: "run".into(),
            seed: 0,
            beta: 0.0,
            r_bit: 0.0,
            policy: ModePolicy::Auto,
            bandwidth_bps: 1e6,
            threshold: 0.5,
            bitmap_dir: None,
        }
    }
}

/// Per-frame outcome of a streamed evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEval {
    pub t: usize,
    pub bits_measured: f64,
    pub bits_estimated: f64,
    pub bce: f64,
    /// Missed plus false detections.
    pub errors: usize,
    pub ground_truth: usize,
}

pub fn latency_ms(bits: f64, bandwidth_bps: f64) -> f64 {
    bits / bandwidth_bps * 1e3
}

fn check_range(ds: &Dataset, frames: &Range<usize>) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if frames.end > ds.frames {
        return Err(Error::InvalidArgument(format!(
            "frames {frames:?} exceed the {} frames in the dataset",
            ds.frames
        )));
    }
    Ok(())
}

fn check_options(opts: &EvalOptions) -> Result<()> {
    if !(opts.bandwidth_bps > 0.0 && opts.bandwidth_bps.is_finite()) {
        return Err(Error::InvalidArgument("bandwidth must be positive".into()));
    }
    if !(opts.threshold > 0.0 && opts.threshold < 1.0) {
        return Err(Error::InvalidArgument("threshold must lie in (0, 1)".into()));
    }
    Ok(())
}

fn detection(pred: &OccupancyGrid, truth: &OccupancyGrid, threshold: f64) -> (usize, usize) {
    let gt = truth.count(0.5);
    let errors = ((1.0 - moda_score(pred, truth, threshold)) * gt.max(1) as f64).round() as usize;
    (errors, gt)
}

fn score(fusion: &crate::diffcore::Net, input: &FusionInput, truth: &OccupancyGrid, threshold: f64) -> Result<(f64, usize, usize)> {
    let pred = fuse_predict(input, fusion)?;
    let bce = bce_distortion(&pred, truth)?;
    let (errors, gt) = detection(&pred, truth, threshold);
    Ok((bce, errors, gt))
}

/// Encodes every device's frames in `frames`, decodes them on a fresh server
/// and runs fusion on the decoded history.
pub fn evaluate_frames(
    bundle: &ModelBundle,
    ds: &Dataset,
    frames: Range<usize>,
    opts: &EvalOptions,
) -> Result<Vec<FrameEval>> {
    check_range(ds, &frames)?;
    check_options(opts)?;
    let fusion = bundle.fusion()?;
    let tau1 = bundle.arch.tau1;
    let mut devices: Vec<DeviceState> = bundle
        .devices
        .iter()
        .enumerate()
        .map(|(k, m)| DeviceState::new(k as u16, m.clone()))
        .collect();
    let mut server = ServerState::from_bundle(bundle);
    if let Some(dir) = &opts.bitmap_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = Vec::with_capacity(frames.len());
    for t in frames {
        let ts = t as u32 + 1;
        let mut measured = 0.0;
        let mut estimated = 0.0;
        for (k, dev) in devices.iter_mut().enumerate() {
            let enc = encode_frame_detailed(dev, &ds.frame_tensor(t, k), ts, opts.policy)?;
            measured += 8.0 * enc.packet.byte_len() as f64;
            estimated += enc.estimated_bits + 8.0 * HEADER_LEN as f64;
            let decoded = decode_frame(&mut server, &enc.packet)?;
            if decoded != enc.zhat {
                return Err(Error::NotLossless {
                    device: k as u16,
                    timestamp: ts,
                });
            }
            if let Some(dir) = &opts.bitmap_dir {
                let bits = gu_bits_map(&enc.zhat, &enc.feature_params)?;
                write_pgm(dir.join(format!("t{t:05}_d{k}.pgm")), &bitmap_pgm(&bits, &enc.zhat.shape)?)?;
            }
        }
        let slots: Vec<Vec<Option<&QuantizedFeature>>> = server
            .devices
            .values()
            .map(|d| {
                let recent = d.recent(tau1 + 1);
                (0..=tau1).map(|o| recent.len().checked_sub(o + 1).map(|i| recent[i])).collect()
            })
            .collect();
        let truth = OccupancyGrid::from_truth(ds.grid, ds.truth(t))?;
        let (bce, errors, gt) = score(fusion, &FusionInput::assemble(&slots)?, &truth, opts.threshold)?;
        out.push(FrameEval {
            t,
            bits_measured: measured,
            bits_estimated: estimated,
            bce,
            errors,
            ground_truth: gt,
        });
    }
    Ok(out)
}

/// Aggregate MODA: one minus all errors over all ground-truth cells.
pub fn aggregate_moda(frames: &[FrameEval]) -> f64 {
    let errors: usize = frames.iter().map(|f| f.errors).sum();
    let gt: usize = frames.iter().map(|f| f.ground_truth).sum();
    1.0 - errors as f64 / gt.max(1) as f64
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

pub fn evaluate_run(bundle: &ModelBundle, ds: &Dataset, frames: Range<usize>, opts: &EvalOptions) -> Result<RateDistortionRecord> {
    let evals = evaluate_frames(bundle, ds, frames, opts)?;
    let bits = mean(evals.iter().map(|f| f.bits_measured));
    Ok(RateDistortionRecord {
        config_id: opts.config_id.clone(),
        seed: opts.seed,
        tau1: bundle.arch.tau1,
        tau2: match opts.policy {
            ModePolicy::Auto => bundle.arch.tau2,
            ModePolicy::HierarchicalOnly => 0,
        },
        beta: opts.beta,
        r_bit: opts.r_bit,
        bits_measured: bits,
        bits_estimated: mean(evals.iter().map(|f| f.bits_estimated)),
        bce: mean(evals.iter().map(|f| f.bce)),
        moda: aggregate_moda(&evals),
        latency_ms: latency_ms(bits, opts.bandwidth_bps),
    })
}

/// Pixel-codec result at one quality. Task metrics are present when a
/// trained bundle scored the reconstructions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub q: u8,
    pub bits_per_frame: f64,
    pub bits_per_pixel: f64,
    pub bce: Option<f64>,
    pub moda: Option<f64>,
    pub latency_ms: f64,
}

/// Codes every camera image of `frames` at quality `q`; with a bundle, the
/// server runs its extractor and fusion head on the reconstructions.
pub fn evaluate_baseline(
    bundle: Option<&ModelBundle>,
    ds: &Dataset,
    frames: Range<usize>,
    q: u8,
    opts: &EvalOptions,
) -> Result<BaselineRecord> {
    check_range(ds, &frames)?;
    check_options(opts)?;
    let start = frames.start;
    let mut bits = Vec::with_capacity(frames.len());
    let mut cache: Vec<Vec<QuantizedFeature>> = Vec::new();
    let mut evals = Vec::new();
    for t in frames {
        let mut frame_bits = 0.0;
        let mut feats = Vec::with_capacity(ds.cameras);
        for k in 0..ds.cameras {
            let (b, recon) = baseline_encode_frame(ds.image(t, k), q)?;
            frame_bits += b as f64;
            if let Some(bundle) = bundle {
                let x = pixels_to_tensor(&recon, ds.height, ds.width);
                feats.push(round_nearest(&bundle.devices[k].extractor.forward(&x)?)?.stamped(k as u16, t as u32 + 1));
            }
        }
        bits.push(frame_bits);
        if let Some(bundle) = bundle {
            cache.push(feats);
            let i = t - start;
            let truth = OccupancyGrid::from_truth(ds.grid, ds.truth(t))?;
            let input = FusionInput::assemble(&fusion_slots(&cache, 0, i, bundle.arch.tau1))?;
            let (bce, errors, gt) = score(bundle.fusion()?, &input, &truth, opts.threshold)?;
            evals.push(FrameEval {
                t,
                bits_measured: frame_bits,
                bits_estimated: frame_bits,
                bce,
                errors,
                ground_truth: gt,
            });
        }
    }
    let per_frame = mean(bits.iter().copied());
    Ok(BaselineRecord {
        q,
        bits_per_frame: per_frame,
        bits_per_pixel: per_frame / (ds.cameras * ds.height * ds.width) as f64,
        bce: bundle.map(|_| mean(evals.iter().map(|f| f.bce))),
        moda: bundle.map(|_| aggregate_moda(&evals)),
        latency_ms: latency_ms(per_frame, opts.bandwidth_bps),
    })
}

pub fn write_records_csv<W: std::io::Write, T: Serialize>(records: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
