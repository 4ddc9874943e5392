//! Integer-lattice rounding and its additive-uniform-noise training proxy.

use rand::Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Integer feature array, the unit that gets entropy coded and transmitted.
///
/// `timestamp` counts frames from 1; a value of 0 marks a feature that has not
/// been attached to a frame yet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedFeature {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
    pub device_id: u16,
    pub timestamp: u32,
}

impl QuantizedFeature {
    pub fn new(shape: &[usize], values: Vec<i32>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape {
                context: "quantized feature".into(),
                expected: shape.to_vec(),
                actual: vec![values.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            device_id: 0,
            timestamp: 0,
        })
    }

    pub fn stamped(mut self, device_id: u16, timestamp: u32) -> Self {
        self.device_id = device_id;
        self.timestamp = timestamp;
        self
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&self.shape, self.values.iter().map(|&v| f64::from(v)).collect())
            .expect("shape checked at construction")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Nearest integer per element; exact halves round away from zero.
pub fn round_nearest(z: &Tensor) -> Result<QuantizedFeature> {
    let values = z
        .data()
        .iter()
        .map(|&v| round_scalar(v))
        .collect::<Result<Vec<_>>>()?;
    QuantizedFeature::new(z.shape(), values)
}

pub fn round_scalar(v: f64) -> Result<i32> {
    if !v.is_finite() {
        return Err(Error::NonFinite("quantizer input".into()));
    }
    let r = v.round();
    if r < f64::from(i32::MIN) || r > f64::from(i32::MAX) {
        return Err(Error::InvalidArgument(format!(
            "value {v} outside the 32-bit integer lattice"
        )));
    }
    Ok(r as i32)
}

/// `z + u` with `u ~ U[-0.5, 0.5)` drawn independently per element.
pub fn add_uniform_noise<R: Rng + ?Sized>(z: &Tensor, rng: &mut R) -> Tensor {
    let mut out = z.clone();
    for v in out.data_mut() {
        *v += rng.random::<f64>() - 0.5;
    }
    out
}
