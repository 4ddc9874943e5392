//! Device-side encode path, server-side decode path and the packet wire
//! format.
//!
//! Packet layout, little-endian:
//!
//! ```text
//! off size field
//!   0    4 magic "TOCM"
//!   4    1 version
//!   5    1 mode (0 hierarchical, 1 temporal)
//!   6    2 device_id
//!   8    4 timestamp
//!  12    6 feature dims c,h,w (u16 each)
//!  18    6 hyper dims c,h,w (zero in mode 1)
//!  24    4 hyper substream length
//!  28    4 feature substream length
//!  32      hyper bytes, then feature bytes
//! ```

use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Net, Tensor};
use crate::entropy_models::{
    hyper_path, temporal_params, GaussianParams, Mode,
};
use crate::error::{Error, Result};
use crate::model::{DeviceModels, ModelBundle};
use crate::quantizer::{round_nearest, QuantizedFeature};
use crate::range_coder::{decode_feature, encode_feature, feature_code_bits, Bitstream};

pub const MAGIC: [u8; 4] = *b"TOCM";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;
pub const STREAM_MAGIC: [u8; 4] = *b"TOCS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PacketMode {
    Hierarchical = 0,
    Temporal = 1,
}

impl PacketMode {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Self::Hierarchical),
            1 => Ok(Self::Temporal),
            other => Err(Error::UnknownMode(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPacket {
    pub mode: PacketMode,
    pub device_id: u16,
    pub timestamp: u32,
    pub feature_dims: [u16; 3],
    pub hyper_dims: [u16; 3],
    pub hyper: Vec<u8>,
    pub feature: Vec<u8>,
}

impl EncodedPacket {
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.hyper.len() + self.feature.len()
    }
}

fn dims16(shape: &[usize]) -> Result<[u16; 3]> {
    if shape.len() != 3 {
        return Err(Error::Shape {
            context: "packet dims".into(),
            expected: vec![0, 0, 0],
            actual: shape.to_vec(),
        });
    }
    let mut out = [0u16; 3];
    for (o, &d) in out.iter_mut().zip(shape) {
        *o = u16::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u16")))?;
    }
    Ok(out)
}

fn dims_usize(d: [u16; 3]) -> Vec<usize> {
    d.iter().map(|&v| usize::from(v)).collect()
}

pub fn serialize_packet(p: &EncodedPacket) -> Result<Vec<u8>> {
    if p.mode == PacketMode::Temporal && (!p.hyper.is_empty() || p.hyper_dims != [0; 3]) {
        return Err(Error::InvalidArgument(
            "temporal packets carry no hyper substream".into(),
        ));
    }
    let hl = u32::try_from(p.hyper.len())
        .map_err(|_| Error::InvalidArgument("hyper substream too long".into()))?;
    let fl = u32::try_from(p.feature.len())
        .map_err(|_| Error::InvalidArgument("feature substream too long".into()))?;
    let mut out = Vec::with_capacity(p.byte_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(p.mode as u8);
    out.extend_from_slice(&p.device_id.to_le_bytes());
    out.extend_from_slice(&p.timestamp.to_le_bytes());
    for d in p.feature_dims.iter().chain(&p.hyper_dims) {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&hl.to_le_bytes());
    out.extend_from_slice(&fl.to_le_bytes());
    out.extend_from_slice(&p.hyper);
    out.extend_from_slice(&p.feature);
    debug_assert_eq!(out.len(), p.byte_len());
    Ok(out)
}

/// Parses one packet from the front of `buf`; returns it with the number of
/// bytes it occupied.
fn parse_prefix(buf: &[u8]) -> Result<(EncodedPacket, usize)> {
    if buf.len() < HEADER_LEN {
        return Err(Error::Truncated(format!(
            "packet header: expected {HEADER_LEN} bytes, got {}",
            buf.len()
        )));
    }
    let magic: [u8; 4] = buf[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            actual: magic,
        });
    }
    if buf[4] != VERSION {
        return Err(Error::BadVersion(buf[4]));
    }
    let mode = PacketMode::from_byte(buf[5])?;
    let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let device_id = u16_at(6);
    let timestamp = u32_at(8);
    let feature_dims = [u16_at(12), u16_at(14), u16_at(16)];
    let hyper_dims = [u16_at(18), u16_at(20), u16_at(22)];
    let hl = u32_at(24) as usize;
    let fl = u32_at(28) as usize;
    if mode == PacketMode::Temporal && (hl != 0 || hyper_dims != [0; 3]) {
        return Err(Error::LengthMismatch {
            what: "temporal packet hyper substream".into(),
            expected: 0,
            actual: hl,
        });
    }
    let total = HEADER_LEN + hl + fl;
    if buf.len() < total {
        return Err(Error::LengthMismatch {
            what: "packet payload".into(),
            expected: total,
            actual: buf.len(),
        });
    }
    let hyper = buf[HEADER_LEN..HEADER_LEN + hl].to_vec();
    let feature = buf[HEADER_LEN + hl..total].to_vec();
    Ok((
        EncodedPacket {
            mode,
            device_id,
            timestamp,
            feature_dims,
            hyper_dims,
            hyper,
            feature,
        },
        total,
    ))
}

pub fn parse_packet(buf: &[u8]) -> Result<EncodedPacket> {
    let (p, used) = parse_prefix(buf)?;
    if used != buf.len() {
        return Err(Error::LengthMismatch {
            what: "packet".into(),
            expected: used,
            actual: buf.len(),
        });
    }
    Ok(p)
}

/// `TOCS` container: magic, u32 packet count, concatenated packets.
pub fn write_stream(packets: &[EncodedPacket]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&STREAM_MAGIC);
    out.extend_from_slice(&(packets.len() as u32).to_le_bytes());
    for p in packets {
        out.extend(serialize_packet(p)?);
    }
    Ok(out)
}

pub fn read_stream(buf: &[u8]) -> Result<Vec<EncodedPacket>> {
    if buf.len() < 8 {
        return Err(Error::Truncated("packet stream header".into()));
    }
    let magic: [u8; 4] = buf[..4].try_into().unwrap();
    if magic != STREAM_MAGIC {
        return Err(Error::BadMagic {
            expected: STREAM_MAGIC,
            actual: magic,
        });
    }
    let count = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let (p, used) = parse_prefix(&buf[pos..])?;
        out.push(p);
        pos += used;
    }
    if pos != buf.len() {
        return Err(Error::LengthMismatch {
            what: "packet stream".into(),
            expected: pos,
            actual: buf.len(),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ModePolicy {
    /// Temporal coding whenever the device has a temporal model and a full
    /// history window.
    #[default]
    Auto,
    HierarchicalOnly,
}

#[derive(Clone, Debug)]
pub struct DeviceState {
    pub device_id: u16,
    pub models: DeviceModels,
    /// Oldest first.
    pub history: VecDeque<QuantizedFeature>,
    last_timestamp: Option<u32>,
}

/// Everything produced while encoding one frame.
#[derive(Clone, Debug)]
pub struct EncodeOutput {
    pub packet: EncodedPacket,
    pub zhat: QuantizedFeature,
    /// Ideal code length of both substreams under the coding tables, escape
    /// bits included and headers excluded.
    pub estimated_bits: f64,
    /// Coding distribution of the feature substream.
    pub feature_params: GaussianParams,
}

fn order(models: &DeviceModels) -> usize {
    models.temporal.as_ref().map_or(0, |t| t.order)
}

/// Most recent first, as the temporal model expects.
fn window(history: &VecDeque<QuantizedFeature>, n: usize) -> Vec<&QuantizedFeature> {
    history.iter().rev().take(n).collect()
}

fn check_time(last: Option<u32>, ts: u32) -> Result<()> {
    match last {
        Some(l) if ts <= l => Err(Error::OutOfOrder { last: l, got: ts }),
        _ => Ok(()),
    }
}

impl DeviceState {
    pub fn new(device_id: u16, models: DeviceModels) -> Self {
        Self {
            device_id,
            models,
            history: VecDeque::new(),
            last_timestamp: None,
        }
    }

    pub fn tau2(&self) -> usize {
        order(&self.models)
    }

    fn push(&mut self, zhat: QuantizedFeature) {
        self.last_timestamp = Some(zhat.timestamp);
        self.history.push_back(zhat);
        while self.history.len() > self.tau2() {
            self.history.pop_front();
        }
    }
}

pub fn encode_frame(
    state: &mut DeviceState,
    frame: &Tensor,
    timestamp: u32,
    policy: ModePolicy,
) -> Result<(EncodedPacket, QuantizedFeature)> {
    let out = encode_frame_detailed(state, frame, timestamp, policy)?;
    Ok((out.packet, out.zhat))
}

pub fn encode_frame_detailed(
    state: &mut DeviceState,
    frame: &Tensor,
    timestamp: u32,
    policy: ModePolicy,
) -> Result<EncodeOutput> {
    check_time(state.last_timestamp, timestamp)?;
    let z = state.models.extractor.forward(frame)?;
    let zhat = round_nearest(&z)?.stamped(state.device_id, timestamp);
    let feature_dims = dims16(&zhat.shape)?;
    let temporal = match (&state.models.temporal, policy) {
        (Some(t), ModePolicy::Auto) if state.history.len() == t.order => Some(t),
        _ => None,
    };
    let out = if let Some(t) = temporal {
        let params = temporal_params(&window(&state.history, t.order), t)?;
        let stream = encode_feature(&zhat.values, &params)?;
        EncodeOutput {
            packet: EncodedPacket {
                mode: PacketMode::Temporal,
                device_id: state.device_id,
                timestamp,
                feature_dims,
                hyper_dims: [0; 3],
                hyper: Vec::new(),
                feature: stream.bytes,
            },
            estimated_bits: feature_code_bits(&zhat.values, &params)?,
            zhat,
            feature_params: params,
        }
    } else {
        // Inference mode never draws noise.
        let hyper = hyper_path(&z, &state.models.hyper, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(0))?;
        let vhat = hyper.v_hat.expect("inference mode rounds the hyper-latent");
        let prior = state.models.hyper.prior_params()?;
        let hyper_stream = encode_feature(&vhat.values, &prior)?;
        let feature_stream = encode_feature(&zhat.values, &hyper.feature_params)?;
        EncodeOutput {
            packet: EncodedPacket {
                mode: PacketMode::Hierarchical,
                device_id: state.device_id,
                timestamp,
                feature_dims,
                hyper_dims: dims16(&vhat.shape)?,
                hyper: hyper_stream.bytes,
                feature: feature_stream.bytes,
            },
            estimated_bits: feature_code_bits(&vhat.values, &prior)?
                + feature_code_bits(&zhat.values, &hyper.feature_params)?,
            zhat,
            feature_params: hyper.feature_params,
        }
    };
    state.push(out.zhat.clone());
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ServerDevice {
    pub models: DeviceModels,
    /// Oldest first; holds at least the temporal window and the fusion window.
    pub history: VecDeque<QuantizedFeature>,
    capacity: usize,
    last_timestamp: Option<u32>,
}

impl ServerDevice {
    /// The last `n` decoded features, oldest first.
    pub fn recent(&self, n: usize) -> Vec<&QuantizedFeature> {
        let skip = self.history.len().saturating_sub(n);
        self.history.iter().skip(skip).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub devices: BTreeMap<u16, ServerDevice>,
    pub aux: Vec<Net>,
    pub fusion: Option<Net>,
}

impl ServerState {
    /// Mirrors every device of `bundle` under ids `0..K`; `history` is the
    /// number of past frames fusion needs in addition to the current one.
    pub fn from_bundle(bundle: &ModelBundle) -> Self {
        let capacity = bundle.arch.tau2.max(bundle.arch.tau1 + 1);
        let devices = bundle
            .devices
            .iter()
            .enumerate()
            .map(|(k, m)| {
                (
                    k as u16,
                    ServerDevice {
                        models: m.clone(),
                        history: VecDeque::new(),
                        capacity,
                        last_timestamp: None,
                    },
                )
            })
            .collect();
        Self {
            devices,
            aux: bundle.aux.clone(),
            fusion: bundle.fusion.clone(),
        }
    }

    pub fn device(&self, id: u16) -> Result<&ServerDevice> {
        self.devices.get(&id).ok_or(Error::UnknownDevice(id))
    }
}

/// Decodes a packet and appends the result to the device's history. The
/// state is left untouched on any error.
pub fn decode_frame(state: &mut ServerState, packet: &EncodedPacket) -> Result<QuantizedFeature> {
    let dev = state
        .devices
        .get_mut(&packet.device_id)
        .ok_or(Error::UnknownDevice(packet.device_id))?;
    check_time(dev.last_timestamp, packet.timestamp)?;
    let fshape = dev.models.extractor.spec.output_shape()?;
    if dims_usize(packet.feature_dims) != fshape {
        return Err(Error::Shape {
            context: "packet feature dims".into(),
            expected: fshape,
            actual: dims_usize(packet.feature_dims),
        });
    }
    let params = match packet.mode {
        PacketMode::Temporal => {
            let t = dev.models.temporal.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "device {} has no temporal model for a temporal packet",
                    packet.device_id
                ))
            })?;
            if dev.history.len() < t.order {
                return Err(Error::MissingHistory {
                    device: packet.device_id,
                    timestamp: packet.timestamp,
                });
            }
            let prev: Vec<&QuantizedFeature> = dev.history.iter().rev().take(t.order).collect();
            temporal_params(&prev, t)?
        }
        PacketMode::Hierarchical => {
            let hshape = dev.models.hyper.latent_shape()?;
            if dims_usize(packet.hyper_dims) != hshape {
                return Err(Error::Shape {
                    context: "packet hyper dims".into(),
                    expected: hshape,
                    actual: dims_usize(packet.hyper_dims),
                });
            }
            let prior = dev.models.hyper.prior_params()?;
            let v = decode_feature(
                &Bitstream {
                    bytes: packet.hyper.clone(),
                },
                &prior,
            )?;
            let vhat = QuantizedFeature::new(&hshape, v)?;
            dev.models.hyper.params_from_latent(&vhat.to_tensor())?
        }
    };
    let values = decode_feature(
        &Bitstream {
            bytes: packet.feature.clone(),
        },
        &params,
    )?;
    let zhat = QuantizedFeature::new(&fshape, values)?.stamped(packet.device_id, packet.timestamp);
    dev.last_timestamp = Some(packet.timestamp);
    dev.history.push_back(zhat.clone());
    while dev.history.len() > dev.capacity {
        dev.history.pop_front();
    }
    Ok(zhat)
}

/// Transmitted size of a set of packets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RateMeasure {
    pub bits_total: u64,
    pub header_bits: u64,
}

impl RateMeasure {
    pub fn payload_bits(&self) -> u64 {
        self.bits_total - self.header_bits
    }
}

pub fn measure_rate(packets: &[EncodedPacket]) -> RateMeasure {
    packets.iter().fold(RateMeasure::default(), |acc, p| RateMeasure {
        bits_total: acc.bits_total + 8 * p.byte_len() as u64,
        header_bits: acc.header_bits + 8 * HEADER_LEN as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_arch;
    use proptest::prelude::*;
    use rand::Rng;

    fn setup(tau2: usize) -> (Vec<DeviceState>, ServerState, ModelBundle) {
        let mut b = ModelBundle::init(tiny_arch(), 11).unwrap();
        b.init_phase2(1, tau2, 11).unwrap();
        // Perturb the temporal heads so they are not trivially unit Gaussians.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in &mut b.devices {
            if let Some(t) = &mut d.temporal {
                for (_, p) in t.transform.params.iter_mut() {
                    for v in p.data_mut() {
                        *v += rng.random_range(-0.2..0.2);
                    }
                }
            }
        }
        let devs = b
            .devices
            .iter()
            .enumerate()
            .map(|(k, m)| DeviceState::new(k as u16, m.clone()))
            .collect();
        let server = ServerState::from_bundle(&b);
        (devs, server, b)
    }

    fn frame(rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
        let a = tiny_arch();
        Tensor::from_vec(
            &[1, a.height, a.width],
            (0..a.height * a.width).map(|_| rng.random_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn bootstrap_then_temporal() {
        let (mut devs, _, _) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p1, _) = encode_frame(&mut devs[0], &frame(&mut rng, 1.0), 1, ModePolicy::Auto).unwrap();
        assert_eq!(p1.mode, PacketMode::Hierarchical);
        assert!(!p1.hyper.is_empty());
        let (p2, _) = encode_frame(&mut devs[0], &frame(&mut rng, 1.0), 2, ModePolicy::Auto).unwrap();
        assert_eq!(p2.mode, PacketMode::Temporal);
        assert!(p2.hyper.is_empty());
        assert_eq!(p2.hyper_dims, [0; 3]);
        let (p3, _) =
            encode_frame(&mut devs[0], &frame(&mut rng, 1.0), 3, ModePolicy::HierarchicalOnly).unwrap();
        assert_eq!(p3.mode, PacketMode::Hierarchical);
    }

    #[test]
    fn no_temporal_model_means_always_hierarchical() {
        let (mut devs, _, _) = setup(0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in 1..4 {
            let (p, _) = encode_frame(&mut devs[1], &frame(&mut rng, 1.0), t, ModePolicy::Auto).unwrap();
            assert_eq!(p.mode, PacketMode::Hierarchical);
        }
        assert!(devs[1].history.is_empty());
    }

    #[test]
    fn thousand_frames_roundtrip_through_the_wire() {
        let (mut devs, mut server, _) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 1..=500u32 {
            for dev in devs.iter_mut() {
                let scale = if t % 50 == 0 { 40.0 } else { 2.0 };
                let out = encode_frame_detailed(dev, &frame(&mut rng, scale), t, ModePolicy::Auto).unwrap();
                let bytes = serialize_packet(&out.packet).unwrap();
                let got = decode_frame(&mut server, &parse_packet(&bytes).unwrap()).unwrap();
                assert_eq!(got, out.zhat);
                let payload = 8.0 * (out.packet.byte_len() - HEADER_LEN) as f64;
                assert!(payload >= out.estimated_bits - 16.0, "{payload} vs {}", out.estimated_bits);
                assert!(payload <= out.estimated_bits + 96.0, "{payload} vs {}", out.estimated_bits);
                let sd = server.device(dev.device_id).unwrap();
                let tail: Vec<_> = sd.recent(dev.history.len()).into_iter().cloned().collect();
                assert_eq!(tail, Vec::from(dev.history.clone()));
            }
        }
    }

    #[test]
    fn tampered_magic_is_rejected() {
        let (mut devs, _, _) = setup(1);
        let (p, _) = encode_frame(&mut devs[0], &frame(&mut ChaCha8Rng::seed_from_u64(4), 1.0), 1, ModePolicy::Auto)
            .unwrap();
        let mut b = serialize_packet(&p).unwrap();
        b[1] = b'X';
        let err = parse_packet(&b).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        let mut b = serialize_packet(&p).unwrap();
        b[4] = 9;
        assert!(matches!(parse_packet(&b), Err(Error::BadVersion(9))));
        b[4] = VERSION;
        b[5] = 7;
        assert!(matches!(parse_packet(&b), Err(Error::UnknownMode(7))));
    }

    #[test]
    fn temporal_packet_before_bootstrap_is_missing_history() {
        let (mut devs, _, b) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        encode_frame(&mut devs[0], &frame(&mut rng, 1.0), 1, ModePolicy::Auto).unwrap();
        let (p2, _) = encode_frame(&mut devs[0], &frame(&mut rng, 1.0), 2, ModePolicy::Auto).unwrap();
        let mut fresh = ServerState::from_bundle(&b);
        let err = decode_frame(&mut fresh, &p2).unwrap_err();
        assert!(matches!(err, Error::MissingHistory { device: 0, timestamp: 2 }));
        assert!(err.to_string().contains("missing history"));
        assert!(fresh.device(0).unwrap().history.is_empty());
    }

    #[test]
    fn out_of_order_and_unknown_device() {
        let (mut devs, mut server, _) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (p, _) = encode_frame(&mut devs[0], &frame(&mut rng, 1.0), 5, ModePolicy::Auto).unwrap();
        assert!(matches!(
            encode_frame(&mut devs[0], &frame(&mut rng, 1.0), 5, ModePolicy::Auto),
            Err(Error::OutOfOrder { last: 5, got: 5 })
        ));
        decode_frame(&mut server, &p).unwrap();
        assert!(matches!(decode_frame(&mut server, &p), Err(Error::OutOfOrder { .. })));
        let mut q = p.clone();
        q.device_id = 40;
        q.timestamp = 9;
        assert!(matches!(decode_frame(&mut server, &q), Err(Error::UnknownDevice(40))));
    }

    #[test]
    fn header_is_sum_of_fields() {
        assert_eq!(HEADER_LEN, 4 + 1 + 1 + 2 + 4 + 6 + 6 + 4 + 4);
        let p = EncodedPacket {
            mode: PacketMode::Temporal,
            device_id: 0x0102,
            timestamp: 0x0a0b0c0d,
            feature_dims: [8, 8, 8],
            hyper_dims: [0; 3],
            hyper: vec![],
            feature: vec![0xaa; 3],
        };
        let b = serialize_packet(&p).unwrap();
        assert_eq!(b.len(), HEADER_LEN + 3);
        assert_eq!(&b[6..8], &[0x02, 0x01]);
        assert_eq!(&b[8..12], &[0x0d, 0x0c, 0x0b, 0x0a]);
        assert_eq!(&b[28..32], &3u32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let p = EncodedPacket {
            mode: PacketMode::Hierarchical,
            device_id: 1,
            timestamp: 1,
            feature_dims: [2, 4, 4],
            hyper_dims: [2, 2, 2],
            hyper: vec![1; 10],
            feature: vec![2; 20],
        };
        let b = serialize_packet(&p).unwrap();
        let err = parse_packet(&b[..b.len() - 5]).unwrap_err();
        match err {
            Error::LengthMismatch { expected, actual, .. } => {
                assert_eq!(expected, 62);
                assert_eq!(actual, 57);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(parse_packet(&b[..10]), Err(Error::Truncated(_))));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(parse_packet(&extra), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn rate_arithmetic() {
        assert_eq!(measure_rate(&[]), RateMeasure::default());
        let mk = |n: usize| EncodedPacket {
            mode: PacketMode::Temporal,
            device_id: 0,
            timestamp: 1,
            feature_dims: [1, 1, 1],
            hyper_dims: [0; 3],
            hyper: vec![],
            feature: vec![0; n - HEADER_LEN],
        };
        let (a, b) = (mk(100), mk(50));
        let both = measure_rate(&[a.clone(), b.clone()]);
        assert_eq!(both.bits_total, 1200);
        assert_eq!(both.header_bits, 512);
        assert_eq!(
            both.bits_total,
            measure_rate(&[a]).bits_total + measure_rate(&[b]).bits_total
        );
    }

    #[test]
    fn stream_container_roundtrip() {
        let (mut devs, _, _) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let packets: Vec<_> = (1..6)
            .map(|t| encode_frame(&mut devs[0], &frame(&mut rng, 1.0), t, ModePolicy::Auto).unwrap().0)
            .collect();
        let bytes = write_stream(&packets).unwrap();
        assert_eq!(&bytes[..4], b"TOCS");
        assert_eq!(read_stream(&bytes).unwrap(), packets);
        assert!(read_stream(&bytes[..bytes.len() - 1]).is_err());
    }

    fn arb_packet() -> impl Strategy<Value = EncodedPacket> {
        (
            any::<bool>(),
            any::<u16>(),
            any::<u32>(),
            any::<[u16; 3]>(),
            any::<[u16; 3]>(),
            proptest::collection::vec(any::<u8>(), 0..64),
            proptest::collection::vec(any::<u8>(), 0..64),
        )
            .prop_map(|(temporal, device_id, timestamp, fd, hd, h, f)| EncodedPacket {
                mode: if temporal { PacketMode::Temporal } else { PacketMode::Hierarchical },
                device_id,
                timestamp,
                feature_dims: fd,
                hyper_dims: if temporal { [0; 3] } else { hd },
                hyper: if temporal { vec![] } else { h },
                feature: f,
            })
    }

    proptest! {
        #[test]
        fn serialize_parse_bijective(p in arb_packet()) {
            let b = serialize_packet(&p).unwrap();
            prop_assert_eq!(b.len(), p.byte_len());
            prop_assert_eq!(parse_packet(&b).unwrap(), p);
        }
    }
}
