//! Server-side occupancy prediction: auxiliary heads, spatial-temporal
//! fusion, distortion and MODA, plus PGM dumps.

use std::path::Path;

use crate::diffcore::{sigmoid, Net, Tensor};
use crate::error::{Error, Result};
use crate::quantizer::QuantizedFeature;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub size: usize,
    pub values: Vec<f64>,
}

impl OccupancyGrid {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::Shape {
                context: "occupancy grid".into(),
                expected: vec![size, size],
                actual: vec![values.len()],
            });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("occupancy values must lie in [0, 1]".into()));
        }
        Ok(Self { size, values })
    }

    pub fn from_truth(size: usize, cells: &[u8]) -> Result<Self> {
        Self::new(size, cells.iter().map(|&c| f64::from(c.min(1))).collect())
    }

    pub fn from_logits(size: usize, logits: &Tensor) -> Result<Self> {
        Self::new(size, logits.data().iter().map(|&l| sigmoid(l)).collect())
    }

    pub fn count(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&v| v >= threshold).count()
    }
}

/// Features of all devices over offsets `0..=tau1`, stacked as
/// `(device, offset)` channel groups, followed by one validity plane per past
/// offset when `tau1 > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionInput {
    pub tensor: Tensor,
    pub cameras: usize,
    pub tau1: usize,
}

impl FusionInput {
    /// `slots[k][o]` is device `k`'s feature at offset `o` (0 = current).
    /// Past slots may be empty only at the start of a sequence: a missing
    /// offset must be missing for every device along with all older ones.
    pub fn assemble(slots: &[Vec<Option<&QuantizedFeature>>]) -> Result<Self> {
        let cameras = slots.len();
        if cameras == 0 {
            return Err(Error::InvalidArgument("fusion needs at least one device".into()));
        }
        let offsets = slots[0].len();
        if offsets == 0 || slots.iter().any(|s| s.len() != offsets) {
            return Err(Error::InvalidArgument(
                "every device must supply the same number of offsets".into(),
            ));
        }
        let shape = match slots[0][0] {
            Some(f) => f.shape.clone(),
            None => {
                return Err(Error::InvalidArgument("current features must be present".into()))
            }
        };
        let valid: Vec<bool> = (0..offsets).map(|o| slots[0][o].is_some()).collect();
        for (o, &v) in valid.iter().enumerate() {
            if slots.iter().any(|s| s[o].is_some() != v) {
                return Err(Error::InvalidArgument(format!(
                    "offset {o} present for some devices only"
                )));
            }
            if !v && valid[o..].iter().any(|&x| x) {
                return Err(Error::InvalidArgument(format!(
                    "gap in history at offset {o}"
                )));
            }
        }
        let plane: usize = shape[1..].iter().product();
        let c = shape[0];
        let tau1 = offsets - 1;
        let channels = cameras * offsets * c + tau1;
        let mut data = Vec::with_capacity(channels * plane);
        for dev in slots {
            for slot in dev {
                match slot {
                    Some(f) => {
                        if f.shape != shape {
                            return Err(Error::Shape {
                                context: "fusion input feature".into(),
                                expected: shape.clone(),
                                actual: f.shape.clone(),
                            });
                        }
                        data.extend(f.values.iter().map(|&v| f64::from(v)));
                    }
                    None => data.extend(std::iter::repeat_n(0.0, c * plane)),
                }
            }
        }
        for &v in &valid[1..] {
            data.extend(std::iter::repeat_n(if v { 1.0 } else { 0.0 }, plane));
        }
        let mut full = vec![channels];
        full.extend_from_slice(&shape[1..]);
        Ok(Self {
            tensor: Tensor::from_vec(&full, data)?,
            cameras,
            tau1,
        })
    }
}

/// Channel-concatenates per-device features in device order.
pub fn aux_input(features: &[&Tensor]) -> Result<Tensor> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("no device features".into()));
    }
    let shape = features[0].shape();
    if let Some(bad) = features.iter().find(|f| f.shape() != shape) {
        return Err(Error::Shape {
            context: "auxiliary input".into(),
            expected: shape.to_vec(),
            actual: bad.shape().to_vec(),
        });
    }
    Tensor::concat_channels(features)
}

fn grid_side(net: &Net) -> Result<usize> {
    let n: usize = net.spec.output_shape()?.iter().product();
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::Spec(format!("head output {n} is not a square grid")));
    }
    Ok(g)
}

pub fn predict(net: &Net, input: &Tensor) -> Result<OccupancyGrid> {
    OccupancyGrid::from_logits(grid_side(net)?, &net.forward(input)?)
}

/// Prediction of `y_{t+tau}` from the current features of all devices.
pub fn auxiliary_predict(zhats: &[&QuantizedFeature], tau: usize, aux: &[Net]) -> Result<OccupancyGrid> {
    let net = aux
        .get(tau)
        .ok_or_else(|| Error::InvalidArgument(format!("no auxiliary head for offset {tau}")))?;
    let tensors: Vec<Tensor> = zhats.iter().map(|z| z.to_tensor()).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    predict(net, &aux_input(&refs)?)
}

pub fn fuse_predict(input: &FusionInput, fusion: &Net) -> Result<OccupancyGrid> {
    let want = fusion.spec.input_shape[0];
    if input.tensor.shape()[0] != want {
        return Err(Error::Shape {
            context: "fusion input channels".into(),
            expected: vec![want],
            actual: vec![input.tensor.shape()[0]],
        });
    }
    predict(fusion, &input.tensor)
}

fn check_same(pred: &OccupancyGrid, truth: &OccupancyGrid) -> Result<()> {
    if pred.size != truth.size {
        return Err(Error::Shape {
            context: "occupancy grids".into(),
            expected: vec![truth.size, truth.size],
            actual: vec![pred.size, pred.size],
        });
    }
    Ok(())
}

fn cell_bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Summed per-cell binary cross-entropy in nats.
pub fn bce_distortion(pred: &OccupancyGrid, truth: &OccupancyGrid) -> Result<f64> {
    check_same(pred, truth)?;
    Ok(pred
        .values
        .iter()
        .zip(&truth.values)
        .map(|(&p, &y)| cell_bce(p, y))
        .sum())
}

/// BCE of `sigmoid(logits)` against `truth` and its gradient w.r.t. the
/// logits. Cells pinned by the probability clamp get zero gradient.
pub fn bce_from_logits(logits: &Tensor, truth: &[f64]) -> Result<(f64, Tensor)> {
    if logits.len() != truth.len() {
        return Err(Error::Shape {
            context: "logits vs target".into(),
            expected: vec![truth.len()],
            actual: logits.shape().to_vec(),
        });
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for ((g, &l), &y) in grad.data_mut().iter_mut().zip(logits.data()).zip(truth) {
        let p = sigmoid(l);
        loss += cell_bce(p, y);
        if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
            *g = p - y;
        }
    }
    Ok((loss, grad))
}

/// `1 - (FN + FP) / max(1, N_gt)` with exact cell matching.
pub fn moda_score(pred: &OccupancyGrid, truth: &OccupancyGrid, threshold: f64) -> f64 {
    moda_with_radius(pred, truth, threshold, 0)
}

/// MODA where a detection within Chebyshev distance `radius` of an
/// unmatched ground-truth cell counts as a hit. Matching is greedy in
/// raster order.
pub fn moda_with_radius(pred: &OccupancyGrid, truth: &OccupancyGrid, threshold: f64, radius: usize) -> f64 {
    assert!(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0, 1)");
    assert_eq!(pred.size, truth.size, "grid sizes differ");
    let g = pred.size;
    let gts: Vec<usize> = (0..g * g).filter(|&i| truth.values[i] >= 0.5).collect();
    let dets: Vec<usize> = (0..g * g).filter(|&i| pred.values[i] >= threshold).collect();
    let mut matched = vec![false; gts.len()];
    let mut fp = 0usize;
    for &d in &dets {
        let (dy, dx) = (d / g, d % g);
        let hit = gts.iter().enumerate().find(|&(j, &t)| {
            !matched[j] && (t / g).abs_diff(dy) <= radius && (t % g).abs_diff(dx) <= radius
        });
        match hit {
            Some((j, _)) => matched[j] = true,
            None => fp += 1,
        }
    }
    let fn_ = matched.iter().filter(|m| !**m).count();
    1.0 - (fn_ + fp) as f64 / gts.len().max(1) as f64
}

/// Binary PGM (P5) image.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Shape {
            context: "pgm pixels".into(),
            expected: vec![height, width],
            actual: vec![pixels.len()],
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn grid_pgm(grid: &OccupancyGrid) -> Result<Vec<u8>> {
    let px: Vec<u8> = grid.values.iter().map(|&v| (v * 255.0).round() as u8).collect();
    pgm_bytes(grid.size, grid.size, &px)
}

/// Per-element bit costs of a `[c, h, w]` feature, channels tiled left to
/// right and scaled so the costliest element is white.
pub fn bitmap_pgm(bits: &[f64], shape: &[usize]) -> Result<Vec<u8>> {
    if shape.len() != 3 || bits.len() != shape.iter().product::<usize>() {
        return Err(Error::Shape {
            context: "bit map".into(),
            expected: shape.to_vec(),
            actual: vec![bits.len()],
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let max = bits.iter().fold(0.0f64, |m, &b| m.max(b));
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut px = vec![0u8; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                px[y * c * w + ch * w + x] = (bits[(ch * h + y) * w + x] * scale).round() as u8;
            }
        }
    }
    pgm_bytes(c * w, h, &px)
}

pub fn write_pgm(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}
