//! Network architectures for every learned map and the checkpoint bundle that
//! holds them.
//!
//! Checkpoint entry names are `<section>/<layer>.<weight|bias>`, with sections
//! `dev{k}.extractor`, `dev{k}.hyper_enc`, `dev{k}.hyper_dec`, `dev{k}.prior`,
//! `dev{k}.temporal`, `aux_{tau}` and `fusion`, plus a `meta/arch` vector.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Checkpoint, Layer, Net, NetSpec, ParamStore, Tensor};
use crate::entropy_models::{FactorizedPrior, HyperModel, TemporalModel, RAW_UNIT_SIGMA};
use crate::error::{Error, Result};

const LEAK: f64 = 0.1;
/// Hidden width of the hyper decoder's dense layer.
const HYPER_HIDDEN: usize = 64;
const TEMPORAL_HIDDEN: usize = 16;
/// Output bias of fresh occupancy heads: logit of a sparse prior (~2.5%).
const HEAD_BIAS: f64 = -3.6;

/// Sizes that fix every network shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    pub feature_channels: usize,
    pub hyper_channels: usize,
    pub hidden_channels: usize,
    pub head_channels: usize,
    pub grid: usize,
    /// Largest auxiliary offset trained in phase 1.
    pub aux_tau: usize,
    /// Fusion history length.
    pub tau1: usize,
    /// Temporal model order; 0 means hierarchical coding only.
    pub tau2: usize,
    /// Per-camera ground-to-pixel maps `[a, b, c, d, e, f]`: column
    /// `a x + b y + c`, row `d x + e y + f`.
    pub views: Vec<[f64; 6]>,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.cameras == 0 || self.grid == 0 {
            return Err(Error::Config("cameras and grid must be positive".into()));
        }
        if !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of 8",
                self.height, self.width
            )));
        }
        if self.feature_channels == 0
            || self.hyper_channels == 0
            || self.hidden_channels == 0
            || self.head_channels == 0
        {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.views.len() != self.cameras || self.views.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "{} view maps for {} cameras",
                self.views.len(),
                self.cameras
            )));
        }
        Ok(())
    }

    pub fn feature_shape(&self) -> Vec<usize> {
        vec![self.feature_channels, self.height / 4, self.width / 4]
    }

    pub fn hyper_shape(&self) -> Vec<usize> {
        vec![self.hyper_channels, self.height / 8, self.width / 8]
    }

    pub fn fusion_channels(&self) -> usize {
        self.cameras * self.feature_channels * (self.tau1 + 1) + self.tau1
    }

    pub fn extractor_spec(&self) -> Result<NetSpec> {
        NetSpec::new(
            &[1, self.height, self.width],
            vec![
                conv(1, self.hidden_channels, 5, 2, 2),
                Layer::LeakyRelu { slope: LEAK },
                conv(self.hidden_channels, self.feature_channels, 3, 2, 1),
            ],
        )
    }

    pub fn hyper_encoder_spec(&self) -> Result<NetSpec> {
        let c = self.feature_channels;
        NetSpec::new(
            &self.feature_shape(),
            vec![
                conv(c, c, 3, 1, 1),
                Layer::LeakyRelu { slope: LEAK },
                conv(c, self.hyper_channels, 3, 2, 1),
            ],
        )
    }

    pub fn hyper_decoder_spec(&self) -> Result<NetSpec> {
        let hs = self.hyper_shape();
        let fs = self.feature_shape();
        let n_in: usize = hs.iter().product();
        let n_out = 2 * fs.iter().product::<usize>();
        NetSpec::new(
            &hs,
            vec![
                Layer::Reshape { shape: vec![n_in] },
                Layer::Dense {
                    inputs: n_in,
                    outputs: HYPER_HIDDEN,
                },
                Layer::LeakyRelu { slope: LEAK },
                Layer::Dense {
                    inputs: HYPER_HIDDEN,
                    outputs: n_out,
                },
                Layer::Reshape {
                    shape: vec![2 * fs[0], fs[1], fs[2]],
                },
            ],
        )
    }

    pub fn temporal_spec(&self, order: usize) -> Result<NetSpec> {
        let fs = self.feature_shape();
        NetSpec::new(
            &[fs[0] * order, fs[1], fs[2]],
            vec![
                conv(fs[0] * order, TEMPORAL_HIDDEN, 3, 1, 1),
                Layer::LeakyRelu { slope: LEAK },
                conv(TEMPORAL_HIDDEN, 2 * fs[0], 3, 1, 1),
            ],
        )
    }

    /// Feature-plane `(row, col)` under the centre of every ground cell, as
    /// seen by camera `k`. Feature element `i` sits over pixel `4 i`.
    pub fn ground_points(&self, k: usize) -> Vec<[f64; 2]> {
        let m = self.views[k];
        let g = self.grid as f64;
        (0..self.grid * self.grid)
            .map(|i| {
                let x = ((i % self.grid) as f64 + 0.5) / g;
                let y = ((i / self.grid) as f64 + 0.5) / g;
                [(m[3] * x + m[4] * y + m[5]) / 4.0, (m[0] * x + m[1] * y + m[2]) / 4.0]
            })
            .collect()
    }

    /// Camera of each channel in the auxiliary heads' input.
    pub fn aux_groups(&self) -> Vec<usize> {
        (0..self.cameras * self.feature_channels)
            .map(|ch| ch / self.feature_channels)
            .collect()
    }

    /// Camera of each fusion input channel; validity planes map to
    /// `cameras`, a map that reads one constant element.
    pub fn fusion_groups(&self) -> Vec<usize> {
        let per_camera = self.feature_channels * (self.tau1 + 1);
        (0..self.fusion_channels())
            .map(|ch| (ch / per_camera).min(self.cameras))
            .collect()
    }

    /// Occupancy head: each channel is resampled onto the ground grid
    /// through its camera's view, then two 3x3 convolutions give one logit
    /// per cell.
    pub fn head_spec(&self, groups: Vec<usize>) -> Result<NetSpec> {
        let fs = self.feature_shape();
        let n = groups.len();
        let g = self.grid;
        let mut maps: Vec<Vec<[f64; 2]>> = (0..self.cameras).map(|k| self.ground_points(k)).collect();
        maps.push(vec![[0.0, 0.0]; g * g]);
        NetSpec::new(
            &[n, fs[1], fs[2]],
            vec![
                Layer::Resample {
                    channels: n,
                    out_h: g,
                    out_w: g,
                    groups,
                    maps,
                },
                conv(n, self.head_channels, 3, 1, 1),
                Layer::LeakyRelu { slope: LEAK },
                conv(self.head_channels, 1, 3, 1, 1),
                Layer::Reshape { shape: vec![g * g] },
            ],
        )
    }

    fn to_meta(&self) -> Vec<f64> {
        [
            self.cameras,
            self.height,
            self.width,
            self.feature_channels,
            self.hyper_channels,
            self.hidden_channels,
            self.head_channels,
            self.grid,
            self.aux_tau,
            self.tau1,
            self.tau2,
        ]
        .iter()
        .map(|&v| v as f64)
        .chain(self.views.iter().flatten().copied())
        .collect()
    }

    fn from_meta(v: &[f64]) -> Result<Self> {
        if v.len() < 11 || v[..11].iter().any(|x| *x < 0.0 || x.fract() != 0.0) || (v.len() - 11) != 6 * v[0] as usize {
            return Err(Error::Config("malformed architecture metadata".into()));
        }
        let u = |i: usize| v[i] as usize;
        let arch = Self {
            cameras: u(0),
            height: u(1),
            width: u(2),
            feature_channels: u(3),
            hyper_channels: u(4),
            hidden_channels: u(5),
            head_channels: u(6),
            grid: u(7),
            aux_tau: u(8),
            tau1: u(9),
            tau2: u(10),
            views: v[11..].chunks(6).map(|c| std::array::from_fn(|i| c[i])).collect(),
        };
        arch.validate()?;
        Ok(arch)
    }
}

fn conv(i: usize, o: usize, k: usize, s: usize, p: usize) -> Layer {
    Layer::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride: s,
        padding: p,
    }
}

/// Zero-weight head emitting `mu = 0`, `sigma = 1` for every element.
fn unit_gaussian_head(net: &mut Net) -> Result<()> {
    let out = net.spec.output_shape()?;
    let half = out.iter().product::<usize>() / 2;
    let per_bias = match net.spec.layers[net.spec.last_trainable().unwrap()] {
        Layer::Dense { .. } => 1,
        _ => out[1] * out[2],
    };
    net.reset_head(|i| {
        if i * per_bias < half {
            0.0
        } else {
            RAW_UNIT_SIGMA
        }
    })
}

fn occupancy_head<R: rand::Rng>(arch: &Arch, groups: Vec<usize>, rng: &mut R) -> Result<Net> {
    let mut net = Net::init(arch.head_spec(groups)?, rng);
    let last = net.spec.last_trainable().unwrap();
    net.params
        .get_mut(&format!("{last:03}.bias"))?
        .data_mut()
        .fill(HEAD_BIAS);
    Ok(net)
}

/// Per-device models: the device and the server both hold a copy.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceModels {
    pub extractor: Net,
    pub hyper: HyperModel,
    pub temporal: Option<TemporalModel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: Arch,
    pub devices: Vec<DeviceModels>,
    /// Auxiliary predictors for offsets `0..=aux_tau`.
    pub aux: Vec<Net>,
    pub fusion: Option<Net>,
}

impl ModelBundle {
    /// Fresh phase-1 models; temporal and fusion parts are left empty.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut devices = Vec::with_capacity(arch.cameras);
        for _ in 0..arch.cameras {
            let extractor = Net::init(arch.extractor_spec()?, &mut rng);
            let encoder = Net::init(arch.hyper_encoder_spec()?, &mut rng);
            let mut decoder = Net::init(arch.hyper_decoder_spec()?, &mut rng);
            unit_gaussian_head(&mut decoder)?;
            devices.push(DeviceModels {
                extractor,
                hyper: HyperModel {
                    encoder,
                    decoder,
                    prior: FactorizedPrior::new(arch.hyper_channels),
                },
                temporal: None,
            });
        }
        let aux = (0..=arch.aux_tau)
            .map(|_| occupancy_head(&arch, arch.aux_groups(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch,
            devices,
            aux,
            fusion: None,
        })
    }

    /// Attaches fresh temporal models of order `tau2` and a fusion head over
    /// `tau1` past frames.
    pub fn init_phase2(&mut self, tau1: usize, tau2: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7068_6173_6532);
        self.arch.tau1 = tau1;
        self.arch.tau2 = tau2;
        for dev in &mut self.devices {
            dev.temporal = if tau2 == 0 {
                None
            } else {
                let mut transform = Net::init(self.arch.temporal_spec(tau2)?, &mut rng);
                unit_gaussian_head(&mut transform)?;
                Some(TemporalModel {
                    transform,
                    order: tau2,
                })
            };
        }
        self.fusion = Some(occupancy_head(&self.arch, self.arch.fusion_groups(), &mut rng)?);
        Ok(())
    }

    pub fn fusion(&self) -> Result<&Net> {
        self.fusion
            .as_ref()
            .ok_or_else(|| Error::MissingSection("fusion section (run phase 2)".into()))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut e = BTreeMap::new();
        let meta = self.arch.to_meta();
        e.insert("meta/arch".to_string(), Tensor::from_vec(&[meta.len()], meta)?);
        for (k, dev) in self.devices.iter().enumerate() {
            dev.extractor.params.export_into(&format!("dev{k}.extractor"), &mut e);
            dev.hyper.encoder.params.export_into(&format!("dev{k}.hyper_enc"), &mut e);
            dev.hyper.decoder.params.export_into(&format!("dev{k}.hyper_dec"), &mut e);
            prior_to_params(&dev.hyper.prior)?.export_into(&format!("dev{k}.prior"), &mut e);
            if let Some(t) = &dev.temporal {
                t.transform.params.export_into(&format!("dev{k}.temporal"), &mut e);
            }
        }
        for (tau, net) in self.aux.iter().enumerate() {
            net.params.export_into(&format!("aux_{tau}"), &mut e);
        }
        if let Some(f) = &self.fusion {
            f.params.export_into("fusion", &mut e);
        }
        Ok(Checkpoint { entries: e })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let e = &ckpt.entries;
        let meta = e
            .get("meta/arch")
            .ok_or_else(|| Error::MissingSection("meta/arch".into()))?;
        let arch = Arch::from_meta(meta.data())?;
        let section = |name: &str, spec: NetSpec| -> Result<Net> {
            let params = ParamStore::import_from(name, e);
            if params.is_empty() {
                return Err(Error::MissingSection(format!("section {name}")));
            }
            Net::new(spec, params)
        };
        let mut devices = Vec::with_capacity(arch.cameras);
        for k in 0..arch.cameras {
            let prior = params_to_prior(
                &ParamStore::import_from(&format!("dev{k}.prior"), e),
                arch.hyper_channels,
            )?;
            let temporal = if arch.tau2 > 0 && e.keys().any(|n| n.starts_with(&format!("dev{k}.temporal/"))) {
                Some(TemporalModel {
                    transform: section(&format!("dev{k}.temporal"), arch.temporal_spec(arch.tau2)?)?,
                    order: arch.tau2,
                })
            } else {
                None
            };
            devices.push(DeviceModels {
                extractor: section(&format!("dev{k}.extractor"), arch.extractor_spec()?)?,
                hyper: HyperModel {
                    encoder: section(&format!("dev{k}.hyper_enc"), arch.hyper_encoder_spec()?)?,
                    decoder: section(&format!("dev{k}.hyper_dec"), arch.hyper_decoder_spec()?)?,
                    prior,
                },
                temporal,
            });
        }
        let aux = (0..=arch.aux_tau)
            .map(|tau| section(&format!("aux_{tau}"), arch.head_spec(arch.aux_groups())?))
            .collect::<Result<Vec<_>>>()?;
        let fusion = if e.keys().any(|n| n.starts_with("fusion/")) {
            Some(section("fusion", arch.head_spec(arch.fusion_groups())?)?)
        } else {
            None
        };
        Ok(Self {
            arch,
            devices,
            aux,
            fusion,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::CheckpointNotFound(path.to_path_buf()));
        }
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn prior_to_params(prior: &FactorizedPrior) -> Result<ParamStore> {
    let c = prior.channels();
    let mut p = ParamStore::new();
    p.insert("mu", Tensor::from_vec(&[c], prior.mu.clone())?);
    p.insert("raw_scale", Tensor::from_vec(&[c], prior.raw_scale.clone())?);
    Ok(p)
}

pub fn params_to_prior(p: &ParamStore, channels: usize) -> Result<FactorizedPrior> {
    let mu = p.get("mu")?;
    let raw = p.get("raw_scale")?;
    if mu.len() != channels || raw.len() != channels {
        return Err(Error::Shape {
            context: "factorized prior".into(),
            expected: vec![channels],
            actual: vec![mu.len(), raw.len()],
        });
    }
    Ok(FactorizedPrior {
        mu: mu.data().to_vec(),
        raw_scale: raw.data().to_vec(),
    })
}

#[cfg(test)]
pub(crate) fn tiny_arch() -> Arch {
    Arch {
        cameras: 2,
        height: 16,
        width: 16,
        feature_channels: 2,
        hyper_channels: 2,
        hidden_channels: 4,
        head_channels: 2,
        grid: 4,
        aux_tau: 1,
        tau1: 1,
        tau2: 1,
        views: views_for(2, 16, 16),
    }
}

#[cfg(test)]
pub(crate) fn views_for(cameras: usize, height: usize, width: usize) -> Vec<[f64; 6]> {
    crate::simtask_harness::WorldSpec {
        cameras,
        height,
        width,
        ..Default::default()
    }
    .views()
}
