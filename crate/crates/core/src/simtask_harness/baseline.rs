//! Data-oriented pixel codec: uniform pixel quantization followed by range
//! coding under one static Gaussian fit to the image.

use crate::entropy_models::SIGMA_MIN;
use crate::error::{Error, Result};
use crate::range_coder::{build_table, rc_decode_with, rc_encode_with, Bitstream};

/// Bits spent on the model header: the rounded mean level and a log-scale
/// code for the spread, one byte each.
pub const BASELINE_HEADER_BITS: usize = 16;

/// Scale codes step by 1/16 of an octave from the floor.
const SIGMA_CODE_STEPS: f64 = 16.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BaselineFrame {
    pub q: u8,
    pub mu_level: u8,
    pub sigma_code: u8,
    pub payload: Vec<u8>,
}

impl BaselineFrame {
    pub fn bits(&self) -> usize {
        BASELINE_HEADER_BITS + 8 * self.payload.len()
    }
}

fn check_q(q: u8) -> Result<()> {
    if !(1..=8).contains(&q) {
        return Err(Error::InvalidArgument(format!("quality {q} outside 1..=8")));
    }
    Ok(())
}

pub fn quantize_pixel(p: u8, q: u8) -> u8 {
    p >> (8 - q)
}

/// Midpoint of the level's bin, so the error is at most half a step.
pub fn dequantize_pixel(level: u8, q: u8) -> u8 {
    let step = 1u16 << (8 - q);
    (level as u16 * step + step / 2) as u8
}

pub fn sigma_from_code(code: u8) -> f64 {
    SIGMA_MIN * 2f64.powf(code as f64 / SIGMA_CODE_STEPS)
}

fn sigma_code(std: f64) -> u8 {
    if std <= SIGMA_MIN {
        return 0;
    }
    (SIGMA_CODE_STEPS * (std / SIGMA_MIN).log2()).round().clamp(0.0, 255.0) as u8
}

pub fn baseline_encode(image: &[u8], q: u8) -> Result<BaselineFrame> {
    check_q(q)?;
    if image.is_empty() {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let levels: Vec<i32> = image.iter().map(|&p| quantize_pixel(p, q) as i32).collect();
    let n = levels.len() as f64;
    let mean = levels.iter().map(|&l| l as f64).sum::<f64>() / n;
    let var = levels.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n;
    let mu_level = mean.round() as u8;
    let code = sigma_code(var.sqrt());
    let table = build_table(mu_level as f64, sigma_from_code(code))?;
    let stream = rc_encode_with(&levels, |_, _| Ok(table.clone()))?;
    Ok(BaselineFrame {
        q,
        mu_level,
        sigma_code: code,
        payload: stream.bytes,
    })
}

/// Reconstructed pixels of a frame holding `n` pixels.
pub fn baseline_decode(frame: &BaselineFrame, n: usize) -> Result<Vec<u8>> {
    check_q(frame.q)?;
    let table = build_table(frame.mu_level as f64, sigma_from_code(frame.sigma_code))?;
    let levels = rc_decode_with(
        &Bitstream {
            bytes: frame.payload.clone(),
        },
        n,
        |_, _| Ok(table.clone()),
    )?;
    let max = (1i32 << frame.q) - 1;
    levels
        .into_iter()
        .map(|l| {
            if (0..=max).contains(&l) {
                Ok(dequantize_pixel(l as u8, frame.q))
            } else {
                Err(Error::InvalidArgument(format!("level {l} outside {}-bit range", frame.q)))
            }
        })
        .collect()
}

/// Coded size in bits and the dequantized image.
pub fn baseline_encode_frame(image: &[u8], q: u8) -> Result<(usize, Vec<u8>)> {
    let frame = baseline_encode(image, q)?;
    let recon = image.iter().map(|&p| dequantize_pixel(quantize_pixel(p, q), q)).collect();
    Ok((frame.bits(), recon))
}
