//! Long-running jobs. Each runs on the blocking pool.

use std::ops::Range;
use std::path::Path;

use axum::extract::State;
use axum::Json;

use tocom_client::api::*;
use tocom_core::model::ModelBundle;
use tocom_core::pipeline::{encode_frame, write_stream, DeviceState, ModePolicy};
use tocom_core::simtask_harness::{
    evaluate_baseline, evaluate_run, gen_dataset, held_out, run_sweep, write_records_csv, Dataset, EvalOptions,
    SweepGrid, WorldSpec,
};
use tocom_core::training::{run_training, Phase, TrainConfig};

use crate::{ApiError, SharedState};

type Reply<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> Reply<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    Ok(Json(tokio::task::spawn_blocking(f).await??))
}

fn frames_or_test(ds: &Dataset, frames: Option<Frames>) -> Result<Range<usize>, ApiError> {
    match frames {
        Some(f) if f.end > ds.frames || f.start >= f.end => Err(ApiError::bad_request(format!(
            "frames {}..{} outside the dataset's {} frames",
            f.start, f.end, ds.frames
        ))),
        Some(f) => Ok(f.start..f.end),
        None => Ok(held_out(ds, &TrainConfig::default())),
    }
}

fn write_csv<T: serde::Serialize>(path: Option<&Path>, records: &[T]) -> Result<(), ApiError> {
    if let Some(p) = path {
        write_records_csv(records, std::fs::File::create(p).map_err(tocom_core::Error::from)?)?;
    }
    Ok(())
}

fn config_id(ckpt: &Path) -> String {
    ckpt.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

pub async fn health(State(state): State<SharedState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        sessions: state.sessions.lock().unwrap().len(),
    })
}

pub async fn gen_data(Json(req): Json<GenDataRequest>) -> Reply<GenDataResponse> {
    blocking(move || {
        let spec = match &req.spec {
            Some(p) => WorldSpec::from_toml(&std::fs::read_to_string(p).map_err(tocom_core::Error::from)?)?,
            None => WorldSpec::default(),
        };
        let ds = gen_dataset(&spec)?;
        ds.save(&req.out)?;
        tracing::info!(frames = ds.frames, out = %req.out.display(), "dataset written");
        Ok(GenDataResponse {
            path: req.out,
            cameras: ds.cameras,
            frames: ds.frames,
            grid: ds.grid,
            height: ds.height,
            width: ds.width,
            seed: ds.seed,
        })
    })
    .await
}

pub async fn train(Json(req): Json<TrainRequest>) -> Reply<TrainResponse> {
    blocking(move || {
        let phase: Phase = req.phase.parse()?;
        let cfg = TrainConfig::load_resolved(&req.config)?;
        let ds = cfg.dataset()?;
        let outcome = run_training(&ds, &cfg, phase)?;
        if let Some(parent) = req.out.parent() {
            std::fs::create_dir_all(parent).map_err(tocom_core::Error::from)?;
        }
        outcome.bundle.save(&req.out)?;
        let (bundle, log) = outcome.into_result().map_err(|e| {
            ApiError::from(e).with_suffix(&format!("; last good parameters saved to {}", req.out.display()))
        })?;
        tracing::info!(out = %req.out.display(), "training finished");
        Ok(TrainResponse {
            out: req.out,
            tau1: bundle.arch.tau1,
            tau2: bundle.arch.tau2,
            log,
        })
    })
    .await
}

fn policy(hierarchical_only: bool) -> ModePolicy {
    if hierarchical_only {
        ModePolicy::HierarchicalOnly
    } else {
        ModePolicy::Auto
    }
}

pub async fn evaluate(Json(req): Json<EvaluateRequest>) -> Reply<RateDistortionRecord> {
    blocking(move || {
        let bundle = ModelBundle::load(&req.ckpt)?;
        let ds = Dataset::load(&req.data)?;
        let frames = frames_or_test(&ds, req.frames)?;
        let opts = EvalOptions {
            config_id: req.config_id.clone().unwrap_or_else(|| config_id(&req.ckpt)),
            policy: policy(req.hierarchical_only),
            bandwidth_bps: req.bandwidth_bps.unwrap_or(EvalOptions::default().bandwidth_bps),
            bitmap_dir: req.dump_bitmaps.clone(),
            ..EvalOptions::default()
        };
        let record = evaluate_run(&bundle, &ds, frames, &opts)?;
        write_csv(req.csv.as_deref(), std::slice::from_ref(&record))?;
        Ok(record)
    })
    .await
}

pub async fn sweep(Json(req): Json<SweepRequest>) -> Reply<SweepResponse> {
    blocking(move || {
        let grid = SweepGrid::load(&req.grid)?;
        let records = run_sweep(&grid)?;
        write_csv(req.csv.as_deref(), &records)?;
        Ok(SweepResponse { records })
    })
    .await
}

pub async fn baseline(Json(req): Json<BaselineRequest>) -> Reply<BaselineRecord> {
    blocking(move || {
        if !(1..=8).contains(&req.q) {
            return Err(ApiError::bad_request(format!("q must be in 1..=8, got {}", req.q)));
        }
        let ds = Dataset::load(&req.data)?;
        let bundle = req.ckpt.as_ref().map(ModelBundle::load).transpose()?;
        let frames = frames_or_test(&ds, req.frames)?;
        let opts = EvalOptions {
            bandwidth_bps: req.bandwidth_bps.unwrap_or(EvalOptions::default().bandwidth_bps),
            ..EvalOptions::default()
        };
        let record = evaluate_baseline(bundle.as_ref(), &ds, frames, req.q, &opts)?;
        write_csv(req.csv.as_deref(), std::slice::from_ref(&record))?;
        Ok(record)
    })
    .await
}

pub async fn encode(Json(req): Json<EncodeRequest>) -> Reply<EncodeResponse> {
    blocking(move || {
        let bundle = ModelBundle::load(&req.ckpt)?;
        let ds = Dataset::load(&req.data)?;
        if ds.cameras != bundle.devices.len() {
            return Err(ApiError::bad_request(format!(
                "dataset has {} cameras, model has {} devices",
                ds.cameras,
                bundle.devices.len()
            )));
        }
        let frames = frames_or_test(&ds, req.frames)?;
        let mut devices: Vec<DeviceState> = bundle
            .devices
            .iter()
            .enumerate()
            .map(|(k, m)| DeviceState::new(k as u16, m.clone()))
            .collect();
        let mut packets = Vec::new();
        for t in frames {
            for (k, dev) in devices.iter_mut().enumerate() {
                let (p, _) = encode_frame(dev, &ds.frame_tensor(t, k), t as u32 + 1, policy(req.hierarchical_only))?;
                packets.push(p);
            }
        }
        let bytes = write_stream(&packets)?;
        std::fs::write(&req.out, &bytes).map_err(tocom_core::Error::from)?;
        Ok(EncodeResponse {
            out: req.out,
            packets: packets.len(),
            bytes: bytes.len(),
        })
    })
    .await
}
