use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{bias_name, weight_name, Layer, NetSpec, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Activations recorded by a forward pass; `activations[0]` is the input.
#[derive(Clone, Debug)]
pub struct Trace {
    pub activations: Vec<Tensor>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("trace holds the input at least")
    }
}

fn check_input(spec: &NetSpec, input: &Tensor) -> Result<()> {
    if input.shape() != spec.input_shape.as_slice() {
        return Err(Error::Shape {
            context: "network input".into(),
            expected: spec.input_shape.clone(),
            actual: input.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn graph_forward(spec: &NetSpec, params: &ParamStore, input: &Tensor) -> Result<Tensor> {
    check_input(spec, input)?;
    let shapes = spec.shapes()?;
    let mut x = input.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        x = layer_forward(i, layer, params, &x, &shapes[i + 1])?;
    }
    Ok(x)
}

pub fn forward_trace(spec: &NetSpec, params: &ParamStore, input: Tensor) -> Result<Trace> {
    check_input(spec, &input)?;
    let shapes = spec.shapes()?;
    let mut activations = Vec::with_capacity(spec.layers.len() + 1);
    activations.push(input);
    for (i, layer) in spec.layers.iter().enumerate() {
        let next = layer_forward(i, layer, params, activations.last().unwrap(), &shapes[i + 1])?;
        activations.push(next);
    }
    Ok(Trace { activations })
}

/// Exact gradients of `<out_grad, output>` with respect to every parameter
/// and to the input.
pub fn graph_backward(
    spec: &NetSpec,
    params: &ParamStore,
    input: &Tensor,
    out_grad: &Tensor,
) -> Result<(ParamStore, Tensor)> {
    let trace = forward_trace(spec, params, input.clone())?;
    backward_from_trace(spec, params, &trace, out_grad)
}

pub fn backward_from_trace(
    spec: &NetSpec,
    params: &ParamStore,
    trace: &Trace,
    out_grad: &Tensor,
) -> Result<(ParamStore, Tensor)> {
    if out_grad.shape() != trace.output().shape() {
        return Err(Error::Shape {
            context: "output gradient".into(),
            expected: trace.output().shape().to_vec(),
            actual: out_grad.shape().to_vec(),
        });
    }
    let mut grads = ParamStore::zeros_for(spec);
    let mut g = out_grad.clone();
    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let x = &trace.activations[i];
        let y = &trace.activations[i + 1];
        g = layer_backward(i, layer, params, x, y, g, &mut grads)?;
    }
    Ok((grads, g))
}

fn layer_forward(
    index: usize,
    layer: &Layer,
    params: &ParamStore,
    x: &Tensor,
    out_shape: &[usize],
) -> Result<Tensor> {
    let mut y = Tensor::zeros(out_shape);
    match layer {
        Layer::Dense { inputs, outputs } => {
            let w = params.get(&weight_name(index))?.data();
            let b = params.get(&bias_name(index))?.data();
            let xd = x.data();
            for (o, out) in y.data_mut().iter_mut().enumerate().take(*outputs) {
                let row = &w[o * inputs..(o + 1) * inputs];
                *out = b[o] + row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let w = params.get(&weight_name(index))?.data();
            let b = params.get(&bias_name(index))?.data();
            let (h, wd) = (x.shape()[1], x.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let xd = x.data();
            let yd = y.data_mut();
            for o in 0..*out_channels {
                let plane = &mut yd[o * oh * ow..(o + 1) * oh * ow];
                plane.fill(b[o]);
                for c in 0..*in_channels {
                    let xin = &xd[c * h * wd..(c + 1) * h * wd];
                    for ky in 0..*kernel {
                        for kx in 0..*kernel {
                            let wv = w[((o * in_channels + c) * kernel + ky) * kernel + kx];
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - *padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                                let orow = &mut plane[oy * ow..(oy + 1) * ow];
                                for (ox, out) in orow.iter_mut().enumerate() {
                                    let ix = (ox * stride + kx) as isize - *padding as isize;
                                    if ix >= 0 && ix < wd as isize {
                                        *out += wv * row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Layer::Relu => {
            for (o, &v) in y.data_mut().iter_mut().zip(x.data()) {
                *o = v.max(0.0);
            }
        }
        Layer::LeakyRelu { slope } => {
            for (o, &v) in y.data_mut().iter_mut().zip(x.data()) {
                *o = if v > 0.0 { v } else { slope * v };
            }
        }
        Layer::Softplus => {
            for (o, &v) in y.data_mut().iter_mut().zip(x.data()) {
                *o = softplus(v);
            }
        }
        Layer::Reshape { .. } => {
            y.data_mut().copy_from_slice(x.data());
        }
        Layer::Resample { groups, maps, .. } => {
            let (h, w) = (x.shape()[1], x.shape()[2]);
            let n = out_shape[1] * out_shape[2];
            let xd = x.data();
            for (c, plane) in y.data_mut().chunks_mut(n).enumerate() {
                let xin = &xd[c * h * w..(c + 1) * h * w];
                for (out, pt) in plane.iter_mut().zip(&maps[groups[c]]) {
                    *out = bilinear_taps(h, w, *pt).iter().map(|&(i, t)| t * xin[i]).sum();
                }
            }
        }
    }
    Ok(y)
}

/// Neighbours of a fractional `(row, col)` point with their bilinear
/// weights; taps outside the plane are dropped.
fn bilinear_taps(h: usize, w: usize, [r, c]: [f64; 2]) -> Vec<(usize, f64)> {
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let mut taps = Vec::with_capacity(4);
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let (rr, cc) = (r0 + dr, c0 + dc);
            let t = wr * wc;
            if t != 0.0 && rr >= 0.0 && cc >= 0.0 && rr < h as f64 && cc < w as f64 {
                taps.push((rr as usize * w + cc as usize, t));
            }
        }
    }
    taps
}

fn layer_backward(
    index: usize,
    layer: &Layer,
    params: &ParamStore,
    x: &Tensor,
    _y: &Tensor,
    g: Tensor,
    grads: &mut ParamStore,
) -> Result<Tensor> {
    let mut gx = Tensor::zeros(x.shape());
    match layer {
        Layer::Dense { inputs, outputs } => {
            let w = params.get(&weight_name(index))?.data();
            let gd = g.data();
            let xd = x.data();
            {
                let gw = grads.get_mut(&weight_name(index))?.data_mut();
                for o in 0..*outputs {
                    let go = gd[o];
                    if go == 0.0 {
                        continue;
                    }
                    for (a, &xi) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(xd) {
                        *a += go * xi;
                    }
                }
            }
            {
                let gb = grads.get_mut(&bias_name(index))?.data_mut();
                for (a, &go) in gb.iter_mut().zip(gd) {
                    *a += go;
                }
            }
            let gxd = gx.data_mut();
            for o in 0..*outputs {
                let go = gd[o];
                if go == 0.0 {
                    continue;
                }
                for (a, &wv) in gxd.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                    *a += go * wv;
                }
            }
        }
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let w = params.get(&weight_name(index))?.data().to_vec();
            let (h, wd) = (x.shape()[1], x.shape()[2]);
            let (oh, ow) = (g.shape()[1], g.shape()[2]);
            let xd = x.data();
            let gd = g.data();
            {
                let gb = grads.get_mut(&bias_name(index))?.data_mut();
                for o in 0..*out_channels {
                    gb[o] += gd[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                }
            }
            let gw = grads.get_mut(&weight_name(index))?.data_mut();
            let gxd = gx.data_mut();
            for o in 0..*out_channels {
                let gplane = &gd[o * oh * ow..(o + 1) * oh * ow];
                for c in 0..*in_channels {
                    let xin = &xd[c * h * wd..(c + 1) * h * wd];
                    let gxin = &mut gxd[c * h * wd..(c + 1) * h * wd];
                    for ky in 0..*kernel {
                        for kx in 0..*kernel {
                            let widx = ((o * in_channels + c) * kernel + ky) * kernel + kx;
                            let wv = w[widx];
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - *padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let base = iy as usize * wd;
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - *padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let gv = gplane[oy * ow + ox];
                                    acc += gv * xin[base + ix as usize];
                                    gxin[base + ix as usize] += gv * wv;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        Layer::Relu => {
            for ((o, &gv), &xv) in gx.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                *o = if xv > 0.0 { gv } else { 0.0 };
            }
        }
        Layer::LeakyRelu { slope } => {
            for ((o, &gv), &xv) in gx.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                *o = if xv > 0.0 { gv } else { slope * gv };
            }
        }
        Layer::Softplus => {
            for ((o, &gv), &xv) in gx.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                *o = gv * sigmoid(xv);
            }
        }
        Layer::Reshape { .. } => {
            gx.data_mut().copy_from_slice(g.data());
        }
        Layer::Resample { groups, maps, .. } => {
            let (h, w) = (x.shape()[1], x.shape()[2]);
            let n = g.shape()[1] * g.shape()[2];
            let gxd = gx.data_mut();
            for (c, gplane) in g.data().chunks(n).enumerate() {
                let gxin = &mut gxd[c * h * w..(c + 1) * h * w];
                for (&gv, pt) in gplane.iter().zip(&maps[groups[c]]) {
                    for (i, t) in bilinear_taps(h, w, *pt) {
                        gxin[i] += t * gv;
                    }
                }
            }
        }
    }
    Ok(gx)
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest relative disagreement between analytic parameter gradients and
/// central finite differences of `<r, f(x)>`, where `r` is a fixed
/// pseudo-random projection of the output.
pub fn gradient_check(spec: &NetSpec, params: &ParamStore, input: &Tensor, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let out_shape = spec.output_shape()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let n: usize = out_shape.iter().product();
    let r = Tensor::from_vec(
        &out_shape,
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )?;
    let (analytic, _) = graph_backward(spec, params, input, &r)?;
    if !analytic.all_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let len = params.get(&name)?.len();
        for i in 0..len {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + eps;
            let up = graph_forward(spec, &probe, input)?.dot(&r);
            probe.get_mut(&name)?.data_mut()[i] = orig - eps;
            let down = graph_forward(spec, &probe, input)?.dot(&r);
            probe.get_mut(&name)?.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("finite difference of {name}[{i}]")));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(&name)?.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
