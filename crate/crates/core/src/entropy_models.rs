//! Probability models over quantized features.
//!
//! Every model in the pipeline reduces to the same primitive: an integer
//! symbol under a Gaussian convolved with a unit-width uniform, i.e. the bin
//! mass `Phi((k + 1/2 - mu) / sigma) - Phi((k - 1/2 - mu) / sigma)`. The
//! hyperprior path and the temporal path differ only in where `(mu, sigma)`
//! come from.

use rand::Rng;

use crate::diffcore::{sigmoid, softplus, Net, Tensor};
use crate::error::{Error, Result};
use crate::quantizer::{add_uniform_noise, round_nearest, QuantizedFeature};

/// Lower bound on every emitted scale.
pub const SIGMA_MIN: f64 = 0.11;

/// `softplus^-1(1)`: raw value that maps to a unit scale.
pub const RAW_UNIT_SIGMA: f64 = 0.541_324_854_612_918_1;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Beyond this the tail is taken from its asymptotic series.
const TAIL_SWITCH: f64 = 30.0;

/// Upper tail of the standard normal, `P(N(0,1) > t)`.
pub fn normal_sf(t: f64) -> f64 {
    0.5 * libm::erfc(t * std::f64::consts::FRAC_1_SQRT_2)
}

pub fn normal_cdf(t: f64) -> f64 {
    normal_sf(-t)
}

/// `ln P(N(0,1) > t)`, finite for every finite `t`.
pub fn log_normal_sf(t: f64) -> f64 {
    if t < TAIL_SWITCH {
        return normal_sf(t).ln();
    }
    let r = 1.0 / (t * t);
    -0.5 * t * t - t.ln() - LN_SQRT_2PI + (1.0 - r + 3.0 * r * r - 15.0 * r * r * r).ln()
}

/// Natural log of the unit-bin mass at `x`, accurate far into the tails.
pub fn gu_log_likelihood(x: f64, mu: f64, sigma: f64) -> f64 {
    let d = (x - mu).abs();
    let lo = (d - 0.5) / sigma;
    if lo <= 0.0 {
        return gu_likelihood(x, mu, sigma).ln();
    }
    let (l_lo, l_hi) = (log_normal_sf(lo), log_normal_sf((d + 0.5) / sigma));
    l_lo + (-(l_hi - l_lo).exp_m1()).ln()
}

/// Mass of the unit bin centred at real `x`. Computed on the tail nearer to
/// zero so the difference never cancels catastrophically.
pub fn gu_likelihood(x: f64, mu: f64, sigma: f64) -> f64 {
    let d = (x - mu).abs();
    normal_sf((d - 0.5) / sigma) - normal_sf((d + 0.5) / sigma)
}

pub fn gu_pmf(k: i64, mu: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(gu_likelihood(k as f64, mu, sigma))
}

fn check_sigma(sigma: f64) -> Result<()> {
    // A tiny tolerance absorbs the f32 round trip of stored scales.
    if !(sigma >= SIGMA_MIN * (1.0 - 1e-9)) || !sigma.is_finite() {
        return Err(Error::ScaleBelowFloor {
            sigma,
            floor: SIGMA_MIN,
        });
    }
    Ok(())
}

/// Bits and their derivatives for one relaxed element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementRate {
    pub bits: f64,
    pub d_x: f64,
    pub d_mu: f64,
    pub d_sigma: f64,
}

/// `-log2 q(x)` and its derivatives. Density ratios are formed in the log
/// domain, so far-tail values keep finite bits and useful gradients.
pub fn gu_rate(x: f64, mu: f64, sigma: f64) -> ElementRate {
    let lp = gu_log_likelihood(x, mu, sigma);
    let a = (x + 0.5 - mu) / sigma;
    let b = (x - 0.5 - mu) / sigma;
    // phi(t) / q(x)
    let ratio = |t: f64| (-0.5 * t * t - LN_SQRT_2PI - lp).exp();
    let (ra, rb) = (ratio(a), ratio(b));
    let dlp_dx = (ra - rb) / sigma;
    let dlp_dsigma = -(a * ra - b * rb) / sigma;
    let scale = -1.0 / std::f64::consts::LN_2;
    ElementRate {
        bits: scale * lp,
        d_x: scale * dlp_dx,
        d_mu: -scale * dlp_dx,
        d_sigma: scale * dlp_dsigma,
    }
}

/// Per-element `(mu, sigma)` of the coding distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl GaussianParams {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::Shape {
                context: "gaussian params".into(),
                expected: mu.shape().to_vec(),
                actual: sigma.shape().to_vec(),
            });
        }
        for &s in sigma.data() {
            check_sigma(s)?;
        }
        Ok(Self { mu, sigma })
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Splits a `[2c, h, w]` network output into means and clamped scales.
    pub fn from_raw(out: &Tensor) -> Result<Self> {
        let c2 = out.shape().first().copied().unwrap_or(0);
        if out.shape().len() != 3 || c2 % 2 != 0 {
            return Err(Error::Shape {
                context: "entropy parameter head".into(),
                expected: vec![c2 + c2 % 2, 0, 0],
                actual: out.shape().to_vec(),
            });
        }
        let parts = out.split_channels(&[c2 / 2, c2 / 2])?;
        let mut sigma = parts[1].clone();
        for v in sigma.data_mut() {
            *v = raw_to_sigma(*v);
        }
        Self::new(parts[0].clone(), sigma)
    }
}

pub fn raw_to_sigma(raw: f64) -> f64 {
    softplus(raw).max(SIGMA_MIN)
}

/// `d sigma / d raw` for [`raw_to_sigma`]; zero where the floor is active.
pub fn raw_to_sigma_grad(raw: f64) -> f64 {
    if softplus(raw) > SIGMA_MIN {
        sigmoid(raw)
    } else {
        0.0
    }
}

/// Total `-log2 q(zhat)` under `params`.
pub fn gu_bits(zhat: &QuantizedFeature, params: &GaussianParams) -> Result<f64> {
    Ok(gu_bits_map(zhat, params)?.iter().sum())
}

/// Per-element code lengths in bits.
pub fn gu_bits_map(zhat: &QuantizedFeature, params: &GaussianParams) -> Result<Vec<f64>> {
    if zhat.shape != params.shape() {
        return Err(Error::Shape {
            context: "gu_bits".into(),
            expected: params.shape().to_vec(),
            actual: zhat.shape.clone(),
        });
    }
    Ok(zhat
        .values
        .iter()
        .zip(params.mu.data())
        .zip(params.sigma.data())
        .map(|((&k, &m), &s)| -gu_log_likelihood(f64::from(k), m, s) / std::f64::consts::LN_2)
        .collect())
}

/// Per-channel Gaussian with learnable location and scale, shared across
/// spatial positions.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrior {
    pub mu: Vec<f64>,
    pub raw_scale: Vec<f64>,
}

impl FactorizedPrior {
    /// Unit-scale, zero-mean prior.
    pub fn new(channels: usize) -> Self {
        Self {
            mu: vec![0.0; channels],
            raw_scale: vec![RAW_UNIT_SIGMA; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn params(&self, shape: &[usize]) -> Result<GaussianParams> {
        factorized_params(self, shape)
    }
}

pub fn factorized_params(prior: &FactorizedPrior, shape: &[usize]) -> Result<GaussianParams> {
    if shape.len() != 3 || shape[0] != prior.channels() {
        return Err(Error::Shape {
            context: "factorized prior channels".into(),
            expected: vec![prior.channels(), 0, 0],
            actual: shape.to_vec(),
        });
    }
    let plane = shape[1] * shape[2];
    let mut mu = Vec::with_capacity(shape[0] * plane);
    let mut sigma = Vec::with_capacity(shape[0] * plane);
    for c in 0..shape[0] {
        let s = raw_to_sigma(prior.raw_scale[c]);
        mu.extend(std::iter::repeat_n(prior.mu[c], plane));
        sigma.extend(std::iter::repeat_n(s, plane));
    }
    GaussianParams::new(Tensor::from_vec(shape, mu)?, Tensor::from_vec(shape, sigma)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Hyper encoder, hyper decoder and the factorized prior over hyper-latents.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperModel {
    pub encoder: Net,
    pub decoder: Net,
    pub prior: FactorizedPrior,
}

#[derive(Clone, Debug)]
pub struct HyperOutput {
    /// Continuous encoder output.
    pub v_latent: Tensor,
    /// Noisy latent in training, rounded latent at inference.
    pub v_coded: Tensor,
    /// Integer latent; present at inference only.
    pub v_hat: Option<QuantizedFeature>,
    pub feature_params: GaussianParams,
}

impl HyperModel {
    pub fn latent_shape(&self) -> Result<Vec<usize>> {
        self.encoder.spec.output_shape()
    }

    pub fn params_from_latent(&self, v_coded: &Tensor) -> Result<GaussianParams> {
        GaussianParams::from_raw(&self.decoder.forward(v_coded)?)
    }

    pub fn prior_params(&self) -> Result<GaussianParams> {
        self.prior.params(&self.latent_shape()?)
    }
}

pub fn hyper_path<R: Rng + ?Sized>(
    z: &Tensor,
    model: &HyperModel,
    mode: Mode,
    rng: &mut R,
) -> Result<HyperOutput> {
    let v_latent = model.encoder.forward(z)?;
    let (v_coded, v_hat) = match mode {
        Mode::Train => (add_uniform_noise(&v_latent, rng), None),
        Mode::Infer => {
            let q = round_nearest(&v_latent)?;
            (q.to_tensor(), Some(q))
        }
    };
    let feature_params = model.params_from_latent(&v_coded)?;
    if feature_params.shape() != z.shape() {
        return Err(Error::Shape {
            context: "hyper decoder output".into(),
            expected: z.shape().to_vec(),
            actual: feature_params.shape().to_vec(),
        });
    }
    Ok(HyperOutput {
        v_latent,
        v_coded,
        v_hat,
        feature_params,
    })
}

/// Conditional model of the current feature given the previous `order`
/// features of the same device.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalModel {
    pub transform: Net,
    pub order: usize,
}

impl TemporalModel {
    /// Channel-stacks history, most recent first.
    pub fn context(&self, prev: &[&QuantizedFeature]) -> Result<Tensor> {
        if prev.len() != self.order || self.order == 0 {
            return Err(Error::InvalidArgument(format!(
                "temporal model of order {} given {} previous features",
                self.order,
                prev.len()
            )));
        }
        let shape = &prev[0].shape;
        if prev.iter().any(|p| &p.shape != shape) {
            return Err(Error::Shape {
                context: "temporal history".into(),
                expected: shape.clone(),
                actual: prev.iter().find(|p| &p.shape != shape).unwrap().shape.clone(),
            });
        }
        let tensors: Vec<Tensor> = prev.iter().map(|p| p.to_tensor()).collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        Tensor::concat_channels(&refs)
    }
}

/// `prev[0]` is the feature at `t-1`, `prev[1]` at `t-2`, and so on.
pub fn temporal_params(prev: &[&QuantizedFeature], model: &TemporalModel) -> Result<GaussianParams> {
    let ctx = model.context(prev)?;
    let params = GaussianParams::from_raw(&model.transform.forward(&ctx)?)?;
    if params.shape() != prev[0].shape.as_slice() {
        return Err(Error::Shape {
            context: "temporal model output".into(),
            expected: prev[0].shape.clone(),
            actual: params.shape().to_vec(),
        });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Layer, NetSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent erf by Maclaurin series, accurate to ~1e-15 for |x| <= 3.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        for n in 1..200 {
            term *= -x2 / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-18 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    fn phi_series(t: f64) -> f64 {
        0.5 * (1.0 + erf_series(t / std::f64::consts::SQRT_2))
    }

    #[test]
    fn oracle_reproduces_reference_values() {
        // 2 Phi(0.5) - 1 and 2 Phi(1) - 1
        let a = 2.0 * phi_series(0.5) - 1.0;
        let b = 2.0 * phi_series(1.0) - 1.0;
        assert!((a - 0.382_924_922_548_026).abs() < 1e-12);
        assert!((b - 0.682_689_492_137_086).abs() < 1e-12);
    }

    #[test]
    fn pmf_matches_series_oracle() {
        let got = gu_pmf(0, 0.0, 1.0).unwrap();
        assert!((got - (2.0 * phi_series(0.5) - 1.0)).abs() < 1e-13);
        assert!((got - 0.382_924_9).abs() < 1e-7);
        let got = gu_pmf(3, 3.0, 0.5).unwrap();
        assert!((got - 0.682_689_5).abs() < 1e-7);
        for &(k, mu, s) in &[(2i64, 0.3, 1.7), (-1, -0.4, 0.8), (0, -0.2, 2.5)] {
            let oracle = phi_series((k as f64 + 0.5 - mu) / s) - phi_series((k as f64 - 0.5 - mu) / s);
            let got = gu_pmf(k, mu, s).unwrap();
            assert!((got - oracle).abs() < 1e-11, "{k} {mu} {s}: {got} vs {oracle}");
        }
    }

    #[test]
    fn pmf_symmetric_about_mean() {
        assert_eq!(gu_pmf(1, 0.0, 1.0).unwrap(), gu_pmf(-1, 0.0, 1.0).unwrap());
    }

    #[test]
    fn pmf_rejects_small_sigma() {
        assert!(matches!(gu_pmf(0, 0.0, 0.05), Err(Error::ScaleBelowFloor { .. })));
    }

    #[test]
    fn single_element_bits() {
        let z = QuantizedFeature::new(&[1], vec![0]).unwrap();
        let p = GaussianParams::new(Tensor::zeros(&[1]), Tensor::filled(&[1], 1.0)).unwrap();
        let bits = gu_bits(&z, &p).unwrap();
        assert!((bits - 1.3849).abs() < 1e-4, "{bits}");
        let empty = QuantizedFeature::new(&[0], vec![]).unwrap();
        let p0 = GaussianParams::new(Tensor::zeros(&[0]), Tensor::zeros(&[0])).unwrap();
        assert_eq!(gu_bits(&empty, &p0).unwrap(), 0.0);
    }

    #[test]
    fn bits_are_additive() {
        let a = QuantizedFeature::new(&[2], vec![1, -2]).unwrap();
        let b = QuantizedFeature::new(&[1], vec![4]).unwrap();
        let ab = QuantizedFeature::new(&[3], vec![1, -2, 4]).unwrap();
        let pa = GaussianParams::new(
            Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap(),
            Tensor::from_vec(&[2], vec![1.0, 0.3]).unwrap(),
        )
        .unwrap();
        let pb = GaussianParams::new(Tensor::scalar(3.0), Tensor::scalar(2.0)).unwrap();
        let pab = GaussianParams::new(
            Tensor::from_vec(&[3], vec![0.5, -1.0, 3.0]).unwrap(),
            Tensor::from_vec(&[3], vec![1.0, 0.3, 2.0]).unwrap(),
        )
        .unwrap();
        let lhs = gu_bits(&ab, &pab).unwrap();
        let rhs = gu_bits(&a, &pa).unwrap() + gu_bits(&b, &pb).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_in_bits() {
        let z = QuantizedFeature::new(&[2], vec![0, 0]).unwrap();
        let p = GaussianParams::new(Tensor::zeros(&[3]), Tensor::filled(&[3], 1.0)).unwrap();
        assert!(gu_bits(&z, &p).is_err());
    }

    #[test]
    fn tail_mass_is_negligible() {
        for &sigma in &[0.11f64, 0.5, 1.0, 3.3, 10.0, 32.0] {
            for &mu in &[0.0f64, 0.37, -5.5, 12.2] {
                let k = mu.round().abs() as i64 + (16.0 * sigma).ceil() as i64;
                let total: f64 = (-k..=k)
                    .map(|i| gu_likelihood(i as f64 + mu.round(), mu, sigma))
                    .sum();
                assert!(1.0 - total < 2f64.powi(-20), "sigma {sigma} mu {mu}: {total}");
            }
        }
    }

    #[test]
    fn rate_gradients_match_finite_differences() {
        let h = 1e-6;
        let cases = [
            (0.3, 0.0, 1.0),
            (2.2, 1.0, 0.7),
            (-1.4, 0.5, 2.0),
            (0.05, 0.1, 0.2),
            (9.0, 0.0, 0.11),
            (-40.0, 3.0, 0.5),
        ];
        for &(x, mu, s) in &cases {
            let r = gu_rate(x, mu, s);
            let fx = (gu_rate(x + h, mu, s).bits - gu_rate(x - h, mu, s).bits) / (2.0 * h);
            let fm = (gu_rate(x, mu + h, s).bits - gu_rate(x, mu - h, s).bits) / (2.0 * h);
            let fs = (gu_rate(x, mu, s + h).bits - gu_rate(x, mu, s - h).bits) / (2.0 * h);
            assert!((r.d_x - fx).abs() < 1e-6 * (1.0 + fx.abs()));
            assert!((r.d_mu - fm).abs() < 1e-6 * (1.0 + fm.abs()));
            assert!((r.d_sigma - fs).abs() < 1e-6 * (1.0 + fs.abs()));
        }
    }

    #[test]
    fn log_tail_is_continuous_and_exact() {
        for t in [-3.0, 0.0, 2.5, 10.0, 29.0] {
            assert!((log_normal_sf(t) - normal_sf(t).ln()).abs() < 1e-12 * (1.0 + t * t));
        }
        let (below, above) = (log_normal_sf(TAIL_SWITCH - 1e-9), log_normal_sf(TAIL_SWITCH));
        assert!((below - above).abs() < 1e-6, "{below} {above}");
        for &(x, mu, s) in &[(0.0, 0.0, 1.0), (3.0, 0.2, 0.5), (-7.0, 1.0, 1.3)] {
            let direct = gu_likelihood(x, mu, s).ln();
            assert!((gu_log_likelihood(x, mu, s) - direct).abs() < 1e-9);
        }
        // Nearer bin edge 95.45 sigma out: about t^2 / (2 ln 2) bits.
        let far = gu_rate(11.0, 0.0, 0.11).bits;
        assert!(far.is_finite() && far > 6570.0 && far < 6590.0, "{far}");
    }

    #[test]
    fn factorized_params_broadcast_and_clamp() {
        let mut prior = FactorizedPrior::new(2);
        prior.mu = vec![0.25, -1.0];
        prior.raw_scale = vec![0.3, -1e9];
        let p = prior.params(&[2, 4, 4]).unwrap();
        assert!(p.mu.data()[..16].iter().all(|&v| v == 0.25));
        assert!(p.mu.data()[16..].iter().all(|&v| v == -1.0));
        assert!(p.sigma.data()[16..].iter().all(|&v| v == SIGMA_MIN));
        assert!(prior.params(&[3, 4, 4]).is_err());

        let v = QuantizedFeature::new(&[2, 4, 4], (0..32).map(|i| (i % 5) - 2).collect()).unwrap();
        let expected: f64 = v
            .values
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let c = i / 16;
                -gu_pmf(i64::from(k), prior.mu[c], raw_to_sigma(prior.raw_scale[c]))
                    .unwrap()
                    .log2()
            })
            .sum();
        assert!((gu_bits(&v, &p).unwrap() - expected).abs() < 1e-12);
    }

    fn head_net(input: &[usize], channels: usize) -> Net {
        let spec = NetSpec::new(
            input,
            vec![Layer::Conv2d {
                in_channels: input[0],
                out_channels: 2 * channels,
                kernel: 3,
                stride: 1,
                padding: 1,
            }],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Net::init(spec, &mut rng);
        let plane = 1;
        net.reset_head(|i| if i / plane < channels { 0.0 } else { RAW_UNIT_SIGMA })
            .unwrap();
        net
    }

    #[test]
    fn initialized_temporal_model_is_standard_normal() {
        for order in [1usize, 2] {
            let model = TemporalModel {
                transform: head_net(&[3 * order, 4, 4], 3),
                order,
            };
            let prev: Vec<QuantizedFeature> = (0..order)
                .map(|i| QuantizedFeature::new(&[3, 4, 4], vec![i as i32 + 2; 48]).unwrap())
                .collect();
            let refs: Vec<&QuantizedFeature> = prev.iter().collect();
            let p = temporal_params(&refs, &model).unwrap();
            assert_eq!(p.shape(), &[3, 4, 4]);
            assert!(p.mu.data().iter().all(|&v| v == 0.0));
            assert!(p.sigma.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
            assert!(temporal_params(&refs[..order - 1], &model).is_err());
        }
    }

    #[test]
    fn hyper_path_shapes_and_modes() {
        let enc = NetSpec::new(
            &[2, 5, 7],
            vec![Layer::Conv2d {
                in_channels: 2,
                out_channels: 1,
                kernel: 3,
                stride: 2,
                padding: 1,
            }],
        )
        .unwrap();
        assert_eq!(enc.output_shape().unwrap(), vec![1, 3, 4]);
        let dec = NetSpec::new(
            &[1, 3, 4],
            vec![
                Layer::Reshape { shape: vec![12] },
                Layer::Dense {
                    inputs: 12,
                    outputs: 4 * 35,
                },
                Layer::Reshape {
                    shape: vec![4, 5, 7],
                },
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut decoder = Net::init(dec, &mut rng);
        decoder
            .reset_head(|i| if i < 70 { 0.0 } else { RAW_UNIT_SIGMA })
            .unwrap();
        let model = HyperModel {
            encoder: Net::init(enc, &mut rng),
            decoder,
            prior: FactorizedPrior::new(1),
        };
        let z = Tensor::from_vec(&[2, 5, 7], (0..70).map(|i| (i as f64).cos() * 3.0).collect())
            .unwrap();
        let out = hyper_path(&z, &model, Mode::Infer, &mut rng).unwrap();
        assert!(out.v_coded.data().iter().all(|v| v.fract() == 0.0));
        assert!(out.v_hat.is_some());
        assert!(out.feature_params.mu.data().iter().all(|&v| v == 0.0));
        assert!(out.feature_params.sigma.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let train = hyper_path(&z, &model, Mode::Train, &mut rng).unwrap();
        assert!(train.v_hat.is_none());
        assert_eq!(train.feature_params.shape(), z.shape());
    }

    proptest! {
        #[test]
        fn pmf_peaks_at_nearest_integer(mu in -20.0f64..20.0, sigma in 0.11f64..8.0) {
            let best = mu.round() as i64;
            let p_best = gu_pmf(best, mu, sigma).unwrap();
            for k in (best - 3)..=(best + 3) {
                prop_assert!(gu_pmf(k, mu, sigma).unwrap() <= p_best + 1e-15);
            }
        }

        #[test]
        fn emitted_scales_respect_floor(raw in -50.0f64..50.0) {
            prop_assert!(raw_to_sigma(raw) >= SIGMA_MIN);
        }
    }
}
