//! Request and response bodies of the HTTP API. Paths are resolved on the
//! server's filesystem.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use tocom_core::simtask_harness::{BaselineRecord, RateDistortionRecord};
pub use tocom_core::training::LogRow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub sessions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataRequest {
    /// World spec file; `None` uses the default world.
    pub spec: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataResponse {
    pub path: PathBuf,
    pub cameras: usize,
    pub frames: usize,
    pub grid: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub config: PathBuf,
    /// `1`, `2` or `all`.
    pub phase: String,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub out: PathBuf,
    pub tau1: usize,
    pub tau2: usize,
    pub log: Vec<LogRow>,
}

/// Half-open frame range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frames {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub csv: Option<PathBuf>,
    pub dump_bitmaps: Option<PathBuf>,
    /// Defaults to the frames after the default train and validation split.
    pub frames: Option<Frames>,
    pub config_id: Option<String>,
    pub bandwidth_bps: Option<f64>,
    #[serde(default)]
    pub hierarchical_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    pub grid: PathBuf,
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResponse {
    pub records: Vec<RateDistortionRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineRequest {
    pub data: PathBuf,
    pub q: u8,
    pub csv: Option<PathBuf>,
    /// With a checkpoint the reconstructions are also scored.
    pub ckpt: Option<PathBuf>,
    pub frames: Option<Frames>,
    pub bandwidth_bps: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub frames: Option<Frames>,
    /// Packet stream written here.
    pub out: PathBuf,
    #[serde(default)]
    pub hierarchical_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub out: PathBuf,
    pub packets: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub ckpt: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: u64,
    pub devices: Vec<u16>,
    pub tau1: usize,
    pub tau2: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedFeature {
    pub device_id: u16,
    pub timestamp: u32,
    /// `hierarchical` or `temporal`.
    pub mode: String,
    /// Packet size including the header.
    pub bits: usize,
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub decoded: Vec<DecodedFeature>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseResponse {
    pub grid: usize,
    /// Row-major occupancy probabilities.
    pub probabilities: Vec<f64>,
    pub occupied: usize,
    /// Latest decoded timestamp per device.
    pub timestamps: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
