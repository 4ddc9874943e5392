//! Decoder sessions. A session mirrors the device models of one checkpoint
//! and keeps each device's decoded history, so temporal packets and the
//! fusion window work across uploads.

use std::sync::atomic::Ordering;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::Json;

use tocom_client::api::*;
use tocom_core::inference::{fuse_predict, FusionInput};
use tocom_core::model::ModelBundle;
use tocom_core::pipeline::{decode_frame, parse_packet, read_stream, PacketMode, ServerState, STREAM_MAGIC};

use crate::{ApiError, SharedState};

pub struct Session {
    state: ServerState,
    tau1: usize,
    tau2: usize,
}

impl Session {
    pub fn new(bundle: &ModelBundle) -> Self {
        Self {
            state: ServerState::from_bundle(bundle),
            tau1: bundle.arch.tau1,
            tau2: bundle.arch.tau2,
        }
    }

    fn info(&self, id: u64) -> SessionInfo {
        SessionInfo {
            id,
            devices: self.state.devices.keys().copied().collect(),
            tau1: self.tau1,
            tau2: self.tau2,
        }
    }

    /// Decodes a single packet or a `TOCS` stream. Packets before a failing
    /// one stay decoded.
    pub fn decode(&mut self, body: &[u8]) -> Result<Vec<DecodedFeature>, ApiError> {
        let packets = if body.starts_with(&STREAM_MAGIC) {
            read_stream(body)?
        } else {
            vec![parse_packet(body)?]
        };
        let mut out = Vec::with_capacity(packets.len());
        for (i, p) in packets.iter().enumerate() {
            let z = decode_frame(&mut self.state, p).map_err(|e| {
                ApiError::from(e).with_suffix(&format!(" (packet {i}; {} decoded before it)", out.len()))
            })?;
            out.push(DecodedFeature {
                device_id: z.device_id,
                timestamp: z.timestamp,
                mode: match p.mode {
                    PacketMode::Hierarchical => "hierarchical",
                    PacketMode::Temporal => "temporal",
                }
                .into(),
                bits: 8 * p.byte_len(),
                shape: z.shape,
                values: z.values,
            });
        }
        Ok(out)
    }

    /// Fuses the newest feature of every device with up to `tau1` older ones.
    pub fn fuse(&self) -> Result<FuseResponse, ApiError> {
        let fusion = self
            .state
            .fusion
            .as_ref()
            .ok_or_else(|| ApiError::bad_request("checkpoint has no fusion head"))?;
        let mut slots = Vec::with_capacity(self.state.devices.len());
        let mut timestamps = Vec::with_capacity(self.state.devices.len());
        for (&id, dev) in &self.state.devices {
            let recent = dev.recent(self.tau1 + 1);
            let newest = recent
                .last()
                .ok_or_else(|| ApiError::bad_request(format!("nothing decoded yet for device {id}")))?;
            timestamps.push(newest.timestamp);
            let mut s: Vec<_> = recent.iter().rev().map(|&f| Some(f)).collect();
            s.resize(self.tau1 + 1, None);
            slots.push(s);
        }
        if timestamps.iter().any(|&t| t != timestamps[0]) {
            return Err(ApiError::bad_request(format!(
                "devices are at different timestamps {timestamps:?}"
            )));
        }
        let grid = fuse_predict(&FusionInput::assemble(&slots)?, fusion)?;
        Ok(FuseResponse {
            grid: grid.size,
            occupied: grid.count(0.5),
            probabilities: grid.values,
            timestamps,
        })
    }
}

fn missing(id: u64) -> ApiError {
    ApiError::not_found(format!("no session {id}"))
}

pub async fn open(State(state): State<SharedState>, Json(req): Json<SessionRequest>) -> Result<Json<SessionInfo>, ApiError> {
    let bundle = tokio::task::spawn_blocking(move || ModelBundle::load(&req.ckpt)).await??;
    let session = Session::new(&bundle);
    let id = state.next_session.fetch_add(1, Ordering::Relaxed) + 1;
    let info = session.info(id);
    state.sessions.lock().unwrap().insert(id, session);
    tracing::info!(id, devices = info.devices.len(), "session opened");
    Ok(Json(info))
}

pub async fn packets(State(state): State<SharedState>, Path(id): Path<u64>, body: Bytes) -> Result<Json<DecodeResponse>, ApiError> {
    let mut sessions = state.sessions.lock().unwrap();
    let session = sessions.get_mut(&id).ok_or_else(|| missing(id))?;
    Ok(Json(DecodeResponse {
        decoded: session.decode(&body)?,
    }))
}

pub async fn fuse(State(state): State<SharedState>, Path(id): Path<u64>) -> Result<Json<FuseResponse>, ApiError> {
    let sessions = state.sessions.lock().unwrap();
    Ok(Json(sessions.get(&id).ok_or_else(|| missing(id))?.fuse()?))
}

pub async fn close(State(state): State<SharedState>, Path(id): Path<u64>) -> Result<Json<SessionInfo>, ApiError> {
    let session = state.sessions.lock().unwrap().remove(&id).ok_or_else(|| missing(id))?;
    Ok(Json(session.info(id)))
}
