//! The phase-1 rate-distortion loss, the temporal cross-entropy loss and the
//! fusion distortion loss, each with exact parameter gradients.

use rand::Rng;

use crate::diffcore::{ParamStore, Tensor, Trace};
use crate::entropy_models::{gu_rate, raw_to_sigma, raw_to_sigma_grad, ElementRate, TemporalModel};
use crate::diffcore::Net;
use crate::error::{Error, Result};
use crate::inference::{bce_from_logits, FusionInput};
use crate::model::{prior_to_params, ModelBundle};
use crate::quantizer::{add_uniform_noise, QuantizedFeature};

use super::{LossReport, TrainConfig};

/// Frames of all devices at time `t` and targets `y_t..y_{t+tau1}`.
#[derive(Clone, Debug)]
pub struct L1Example {
    pub frames: Vec<Tensor>,
    pub targets: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceGrads {
    pub extractor: ParamStore,
    pub hyper_enc: ParamStore,
    pub hyper_dec: ParamStore,
    /// Entries `mu` and `raw_scale`.
    pub prior: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase1Grads {
    pub devices: Vec<DeviceGrads>,
    pub aux: Vec<ParamStore>,
}

impl Phase1Grads {
    fn zeros(bundle: &ModelBundle) -> Result<Self> {
        let devices = bundle
            .devices
            .iter()
            .map(|d| {
                Ok(DeviceGrads {
                    extractor: d.extractor.params.zeros_like(),
                    hyper_enc: d.hyper.encoder.params.zeros_like(),
                    hyper_dec: d.hyper.decoder.params.zeros_like(),
                    prior: prior_to_params(&d.hyper.prior)?.zeros_like(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            devices,
            aux: bundle.aux.iter().map(|a| a.params.zeros_like()).collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.aux.iter().all(ParamStore::all_finite)
            && self.devices.iter().all(|d| {
                d.extractor.all_finite()
                    && d.hyper_enc.all_finite()
                    && d.hyper_dec.all_finite()
                    && d.prior.all_finite()
            })
    }
}

struct DeviceForward {
    extractor: Trace,
    hyper_enc: Trace,
    hyper_dec: Trace,
    z_rates: Vec<ElementRate>,
    v_rates: Vec<ElementRate>,
    z_noisy: Tensor,
}

fn device_forward<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    k: usize,
    frame: &Tensor,
    rng: &mut R,
) -> Result<DeviceForward> {
    let dev = &bundle.devices[k];
    let extractor = dev.extractor.trace(frame.clone())?;
    let z = extractor.output().clone();
    let z_noisy = add_uniform_noise(&z, rng);
    let hyper_enc = dev.hyper.encoder.trace(z)?;
    let v_noisy = add_uniform_noise(hyper_enc.output(), rng);
    let hyper_dec = dev.hyper.decoder.trace(v_noisy.clone())?;
    let raw = hyper_dec.output().data();
    let n = z_noisy.len();
    if raw.len() != 2 * n {
        return Err(Error::Shape {
            context: "hyper decoder output".into(),
            expected: vec![2 * n],
            actual: vec![raw.len()],
        });
    }
    let z_rates = z_noisy
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| gu_rate(x, raw[i], raw_to_sigma(raw[n + i])))
        .collect();
    let plane = v_noisy.len() / dev.hyper.prior.channels();
    let prior = &dev.hyper.prior;
    let v_rates = v_noisy
        .data()
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let c = j / plane;
            gu_rate(x, prior.mu[c], raw_to_sigma(prior.raw_scale[c]))
        })
        .collect();
    Ok(DeviceForward {
        extractor,
        hyper_enc,
        hyper_dec,
        z_rates,
        v_rates,
        z_noisy,
    })
}

/// Phase-1 objective `sum_tau w_tau BCE(aux_tau(z~), y_{t+tau}) + beta *
/// max(R, R_bit)` with `R` the batch-mean relaxed rate in bits. Noise is
/// drawn from `rng` per example and device: feature noise, then hyper noise.
pub fn loss_l1<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    batch: &[L1Example],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(LossReport, Phase1Grads)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let weights = cfg.weights();
    if weights.len() != bundle.aux.len() {
        return Err(Error::Config(format!(
            "{} loss weights for {} auxiliary heads",
            weights.len(),
            bundle.aux.len()
        )));
    }
    let k_dev = bundle.devices.len();
    let b = batch.len() as f64;
    let c = bundle.arch.feature_channels;

    struct ExampleForward {
        devices: Vec<DeviceForward>,
        aux: Vec<Trace>,
        dlogits: Vec<Tensor>,
    }
    let mut fwd = Vec::with_capacity(batch.len());
    let mut distortion = 0.0;
    let mut rate = 0.0;
    for ex in batch {
        if ex.frames.len() != k_dev || ex.targets.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "example has {} frames and {} targets, expected {} and {}",
                ex.frames.len(),
                ex.targets.len(),
                k_dev,
                weights.len()
            )));
        }
        let devices = ex
            .frames
            .iter()
            .enumerate()
            .map(|(k, f)| device_forward(bundle, k, f, rng))
            .collect::<Result<Vec<_>>>()?;
        for d in &devices {
            rate += d.z_rates.iter().chain(&d.v_rates).map(|r| r.bits).sum::<f64>();
        }
        let parts: Vec<&Tensor> = devices.iter().map(|d| &d.z_noisy).collect();
        let input = Tensor::concat_channels(&parts)?;
        let mut aux = Vec::with_capacity(weights.len());
        let mut dlogits = Vec::with_capacity(weights.len());
        for (tau, net) in bundle.aux.iter().enumerate() {
            let tr = net.trace(input.clone())?;
            let (l, g) = bce_from_logits(tr.output(), &ex.targets[tau])?;
            distortion += weights[tau] * l;
            aux.push(tr);
            dlogits.push(g);
        }
        fwd.push(ExampleForward {
            devices,
            aux,
            dlogits,
        });
    }
    distortion /= b;
    rate /= b;
    let rate_term = rate.max(cfg.r_bit);
    let total = distortion + cfg.beta * rate_term;
    if !total.is_finite() {
        return Err(Error::NonFinite("phase-1 loss".into()));
    }
    // max(R, R_bit) passes gradient only while R is the larger term.
    let g_rate = if rate >= cfg.r_bit { cfg.beta / b } else { 0.0 };

    let mut grads = Phase1Grads::zeros(bundle)?;
    for ex in &fwd {
        let mut d_input: Option<Tensor> = None;
        for (tau, net) in bundle.aux.iter().enumerate() {
            let mut g = ex.dlogits[tau].clone();
            let s = weights[tau] / b;
            g.data_mut().iter_mut().for_each(|v| *v *= s);
            let (pg, din) = net.backward(&ex.aux[tau], &g)?;
            grads.aux[tau].add_scaled(&pg, 1.0)?;
            match &mut d_input {
                Some(acc) => acc.data_mut().iter_mut().zip(din.data()).for_each(|(a, v)| *a += v),
                None => d_input = Some(din),
            }
        }
        let d_parts = d_input
            .expect("at least one auxiliary head")
            .split_channels(&vec![c; k_dev])?;
        for (k, (dev_fwd, mut dz)) in ex.devices.iter().zip(d_parts).enumerate() {
            let dev = &bundle.devices[k];
            let dg = &mut grads.devices[k];
            if g_rate != 0.0 {
                let n = dz.len();
                let raw = dev_fwd.hyper_dec.output();
                let mut d_raw = Tensor::zeros(raw.shape());
                {
                    let rd = raw.data();
                    let dr = d_raw.data_mut();
                    for (i, r) in dev_fwd.z_rates.iter().enumerate() {
                        dr[i] = g_rate * r.d_mu;
                        dr[n + i] = g_rate * r.d_sigma * raw_to_sigma_grad(rd[n + i]);
                    }
                }
                for (d, r) in dz.data_mut().iter_mut().zip(&dev_fwd.z_rates) {
                    *d += g_rate * r.d_x;
                }
                let (gd, mut dv) = dev.hyper.decoder.backward(&dev_fwd.hyper_dec, &d_raw)?;
                dg.hyper_dec.add_scaled(&gd, 1.0)?;
                let plane = dv.len() / dev.hyper.prior.channels();
                let mut d_mu = vec![0.0; dev.hyper.prior.channels()];
                let mut d_rs = vec![0.0; dev.hyper.prior.channels()];
                for (j, (d, r)) in dv.data_mut().iter_mut().zip(&dev_fwd.v_rates).enumerate() {
                    *d += g_rate * r.d_x;
                    let ch = j / plane;
                    d_mu[ch] += g_rate * r.d_mu;
                    d_rs[ch] += g_rate * r.d_sigma * raw_to_sigma_grad(dev.hyper.prior.raw_scale[ch]);
                }
                for (ch, v) in dg.prior.get_mut("mu")?.data_mut().iter_mut().enumerate() {
                    *v += d_mu[ch];
                }
                for (ch, v) in dg.prior.get_mut("raw_scale")?.data_mut().iter_mut().enumerate() {
                    *v += d_rs[ch];
                }
                let (ge, dz_hyper) = dev.hyper.encoder.backward(&dev_fwd.hyper_enc, &dv)?;
                dg.hyper_enc.add_scaled(&ge, 1.0)?;
                dz.data_mut().iter_mut().zip(dz_hyper.data()).for_each(|(a, v)| *a += v);
            }
            let (gx, _) = dev.extractor.backward(&dev_fwd.extractor, &dz)?;
            dg.extractor.add_scaled(&gx, 1.0)?;
        }
    }
    Ok((
        LossReport {
            distortion_nats: distortion,
            rate_bits: rate,
            rate_term,
            total,
        },
        grads,
    ))
}

/// Mean over windows of the bits needed for the newest feature given the
/// older ones. Each window is oldest first and holds `order + 1` features.
pub fn loss_l2(model: &TemporalModel, windows: &[Vec<&QuantizedFeature>]) -> Result<(f64, ParamStore)> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let b = windows.len() as f64;
    let mut grads = model.transform.params.zeros_like();
    let mut bits = 0.0;
    for w in windows {
        if w.len() != model.order + 1 {
            return Err(Error::InvalidArgument(format!(
                "window of {} features for a temporal model of order {}",
                w.len(),
                model.order
            )));
        }
        let target = w[model.order];
        let prev: Vec<&QuantizedFeature> = w[..model.order].iter().rev().copied().collect();
        let tr = model.transform.trace(model.context(&prev)?)?;
        let raw = tr.output();
        let n = target.len();
        if raw.len() != 2 * n {
            return Err(Error::Shape {
                context: "temporal model output".into(),
                expected: vec![2 * n],
                actual: vec![raw.len()],
            });
        }
        let rd = raw.data();
        let mut d_raw = Tensor::zeros(raw.shape());
        let dr = d_raw.data_mut();
        for (i, &x) in target.values.iter().enumerate() {
            let r = gu_rate(f64::from(x), rd[i], raw_to_sigma(rd[n + i]));
            bits += r.bits;
            dr[i] = r.d_mu / b;
            dr[n + i] = r.d_sigma * raw_to_sigma_grad(rd[n + i]) / b;
        }
        let (g, _) = model.transform.backward(&tr, &d_raw)?;
        grads.add_scaled(&g, 1.0)?;
    }
    let bits = bits / b;
    if !bits.is_finite() {
        return Err(Error::NonFinite("temporal loss".into()));
    }
    Ok((bits, grads))
}

/// Mean fusion BCE in nats over the batch.
pub fn loss_l3(fusion: &Net, batch: &[(FusionInput, Vec<f64>)]) -> Result<(f64, ParamStore)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let b = batch.len() as f64;
    let mut grads = fusion.params.zeros_like();
    let mut nats = 0.0;
    for (input, target) in batch {
        if input.tensor.shape() != fusion.spec.input_shape.as_slice() {
            return Err(Error::Shape {
                context: "fusion input".into(),
                expected: fusion.spec.input_shape.clone(),
                actual: input.tensor.shape().to_vec(),
            });
        }
        let tr = fusion.trace(input.tensor.clone())?;
        let (l, mut g) = bce_from_logits(tr.output(), target)?;
        nats += l;
        g.data_mut().iter_mut().for_each(|v| *v /= b);
        let (pg, _) = fusion.backward(&tr, &g)?;
        grads.add_scaled(&pg, 1.0)?;
    }
    let nats = nats / b;
    if !nats.is_finite() {
        return Err(Error::NonFinite("fusion loss".into()));
    }
    Ok((nats, grads))
}
