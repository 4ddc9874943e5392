//! Minimal deterministic differentiable kernel: dense and 2-D convolution
//! layers, a few pointwise nonlinearities, a named parameter store, exact
//! reverse-mode gradients and Adam.
//!
//! Networks are plain layer lists evaluated one example at a time in `f64`.
//! There is no general autodiff; each layer kind knows its own adjoint.

mod checkpoint;
mod graph;
mod optim;

pub use checkpoint::Checkpoint;
pub use graph::{
    backward_from_trace, forward_trace, gradient_check, graph_backward, graph_forward, sigmoid,
    softplus, Trace,
};
pub use optim::{adam_step, OptState};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                context: "tensor construction".into(),
                expected: shape.to_vec(),
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                context: "reshape".into(),
                expected: shape.to_vec(),
                actual: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Stacks `[c_i, h, w]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        if first.shape.len() != 3 {
            return Err(Error::Shape {
                context: "concat_channels".into(),
                expected: vec![0, 0, 0],
                actual: first.shape.clone(),
            });
        }
        let (h, w) = (first.shape[1], first.shape[2]);
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.len() != 3 || p.shape[1] != h || p.shape[2] != w {
                return Err(Error::Shape {
                    context: "concat_channels".into(),
                    expected: vec![p.shape.first().copied().unwrap_or(0), h, w],
                    actual: p.shape.clone(),
                });
            }
            channels += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(&[channels, h, w], data)
    }

    /// Splits a `[c, h, w]` tensor into consecutive channel blocks.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if self.shape.len() != 3 || sizes.iter().sum::<usize>() != self.shape[0] {
            return Err(Error::Shape {
                context: "split_channels".into(),
                expected: vec![sizes.iter().sum(), 0, 0],
                actual: self.shape.clone(),
            });
        }
        let plane = self.shape[1] * self.shape[2];
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &c in sizes {
            out.push(Tensor {
                shape: vec![c, self.shape[1], self.shape[2]],
                data: self.data[start * plane..(start + c) * plane].to_vec(),
            });
            start += c;
        }
        Ok(out)
    }
}

/// One layer of a feed-forward network.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Fully connected; flattens its input, which must hold `inputs` values.
    Dense { inputs: usize, outputs: usize },
    /// Square-kernel convolution over `[c, h, w]` with zero padding.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    LeakyRelu { slope: f64 },
    Softplus,
    Reshape { shape: Vec<usize> },
    /// Fixed bilinear resampling of every channel plane onto an
    /// `out_h x out_w` grid. Channel `c` reads its plane at the `(row, col)`
    /// points `maps[groups[c]]`, row-major over the output; points outside
    /// the plane read zero.
    Resample {
        channels: usize,
        out_h: usize,
        out_w: usize,
        groups: Vec<usize>,
        maps: Vec<Vec<[f64; 2]>>,
    },
}

impl Layer {
    pub fn is_trainable(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::LeakyRelu { .. } => "leaky_relu",
            Layer::Softplus => "softplus",
            Layer::Reshape { .. } => "reshape",
            Layer::Resample { .. } => "resample",
        }
    }

    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::Shape {
            context: format!("layer {index} ({})", self.kind()),
            expected,
            actual: input.to_vec(),
        };
        match self {
            Layer::Dense { inputs, outputs } => {
                if input.iter().product::<usize>() != *inputs {
                    return Err(mismatch(vec![*inputs]));
                }
                Ok(vec![*outputs])
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(mismatch(vec![*in_channels, 0, 0]));
                }
                if *stride == 0 || *kernel == 0 {
                    return Err(Error::Spec(format!(
                        "layer {index}: kernel and stride must be positive"
                    )));
                }
                let h = input[1] + 2 * padding;
                let w = input[2] + 2 * padding;
                if h < *kernel || w < *kernel {
                    return Err(mismatch(vec![*in_channels, *kernel, *kernel]));
                }
                Ok(vec![
                    *out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            Layer::Relu | Layer::LeakyRelu { .. } | Layer::Softplus => Ok(input.to_vec()),
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(mismatch(shape.clone()));
                }
                Ok(shape.clone())
            }
            Layer::Resample {
                channels,
                out_h,
                out_w,
                groups,
                maps,
            } => {
                if input.len() != 3 || input[0] != *channels {
                    return Err(mismatch(vec![*channels, 0, 0]));
                }
                if groups.len() != *channels || groups.iter().any(|&g| g >= maps.len()) {
                    return Err(Error::Spec(format!("layer {index}: every channel needs a sampling map")));
                }
                let n = out_h * out_w;
                if maps.iter().any(|m| m.len() != n || m.iter().flatten().any(|v| !v.is_finite())) {
                    return Err(Error::Spec(format!(
                        "layer {index}: sampling maps must hold {n} finite points"
                    )));
                }
                Ok(vec![*channels, *out_h, *out_w])
            }
        }
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match self {
            Layer::Dense { inputs, outputs } => Some((vec![*outputs, *inputs], vec![*outputs])),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![*out_channels, *in_channels, *kernel, *kernel],
                vec![*out_channels],
            )),
            _ => None,
        }
    }
}

/// A network: declared input shape plus an ordered list of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

pub(crate) fn weight_name(index: usize) -> String {
    format!("{index:03}.weight")
}

pub(crate) fn bias_name(index: usize) -> String {
    format!("{index:03}.bias")
}

impl NetSpec {
    pub fn new(input_shape: &[usize], layers: Vec<Layer>) -> Result<Self> {
        let spec = Self {
            input_shape: input_shape.to_vec(),
            layers,
        };
        spec.shapes()?;
        Ok(spec)
    }

    /// Shapes of every activation, starting with the input.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::Spec("network needs at least one layer".into()));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(i, shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap())
    }

    /// `(name, shape)` for every trainable tensor, in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((w, b)) = layer.param_shapes() {
                out.push((weight_name(i), w));
                out.push((bias_name(i), b));
            }
        }
        out
    }

    /// Index of the last trainable layer, if any.
    pub fn last_trainable(&self) -> Option<usize> {
        self.layers.iter().rposition(Layer::is_trainable)
    }
}

/// Named parameter tensors. Iteration order is the layer order because
/// names are zero-padded layer indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Self {
        let mut tensors = BTreeMap::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let Some((wshape, bshape)) = layer.param_shapes() else {
                continue;
            };
            let fan_in: usize = wshape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..wshape.iter().product::<usize>())
                .map(|_| {
                    let n: f64 = StandardNormal.sample(rng);
                    n * std
                })
                .collect();
            tensors.insert(weight_name(i), Tensor { shape: wshape, data });
            tensors.insert(bias_name(i), Tensor::zeros(&bshape));
        }
        Self { tensors }
    }

    pub fn zeros_for(spec: &NetSpec) -> Self {
        let tensors = spec
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self { tensors }
    }

    /// Checks that every trainable layer of `spec` has correctly shaped entries
    /// and nothing else is present.
    pub fn validate(&self, spec: &NetSpec) -> Result<()> {
        let expected = spec.param_shapes();
        for (name, shape) in &expected {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    context: format!("parameter {name}"),
                    expected: shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        if expected.len() != self.tensors.len() {
            return Err(Error::Spec(format!(
                "parameter store holds {} tensors, network expects {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// `self += scale * other`, entry by entry.
    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let o = other.get(name)?;
            for (a, b) in t.data.iter_mut().zip(&o.data) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Copies entries into `out` with `prefix/` prepended.
    pub fn export_into(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        for (n, t) in &self.tensors {
            out.insert(format!("{prefix}/{n}"), t.clone());
        }
    }

    /// Collects entries named `prefix/...` from a flat map.
    pub fn import_from(prefix: &str, entries: &BTreeMap<String, Tensor>) -> Self {
        let lead = format!("{prefix}/");
        let tensors = entries
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&lead).map(|s| (s.to_string(), t.clone())))
            .collect();
        Self { tensors }
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    pub spec: NetSpec,
    pub params: ParamStore,
}

impl Net {
    pub fn new(spec: NetSpec, params: ParamStore) -> Result<Self> {
        params.validate(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Self {
        let params = ParamStore::init(&spec, rng);
        Self { spec, params }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        graph_forward(&self.spec, &self.params, input)
    }

    pub fn trace(&self, input: Tensor) -> Result<Trace> {
        forward_trace(&self.spec, &self.params, input)
    }

    pub fn backward(&self, trace: &Trace, out_grad: &Tensor) -> Result<(ParamStore, Tensor)> {
        backward_from_trace(&self.spec, &self.params, trace, out_grad)
    }

    /// Zeroes the last trainable layer and sets its bias to `bias(i)`.
    pub fn reset_head(&mut self, bias: impl Fn(usize) -> f64) -> Result<()> {
        let idx = self
            .spec
            .last_trainable()
            .ok_or_else(|| Error::Spec("network has no trainable layer".into()))?;
        self.params
            .get_mut(&weight_name(idx))?
            .data_mut()
            .fill(0.0);
        let b = self.params.get_mut(&bias_name(idx))?;
        let per_channel = b.len();
        for (i, v) in b.data_mut().iter_mut().enumerate() {
            *v = bias(i);
        }
        debug_assert!(per_channel > 0);
        Ok(())
    }
}
