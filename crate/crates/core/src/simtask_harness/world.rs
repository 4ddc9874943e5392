//! Synthetic multi-camera occupancy world and the `TOCD` dataset format.
//!
//! Agents move on the unit square. Every camera sees them through a fixed
//! affine view map as Gaussian blobs over a flat background with pixel noise;
//! the target marks the ground-grid cells that contain an agent.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TOCD";
pub const VERSION: u8 = 2;
pub const HEADER_LEN: usize = 4 + 1 + 2 + 4 + 2 + 2 + 2 + 8;
pub const FILE_NAME: &str = "dataset.tocd";

/// Pixel value mapped to 0 when images are fed to the extractor.
const PIXEL_CENTER: f64 = 128.0;
const PIXEL_SCALE: f64 = 64.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub cameras: usize,
    pub agents: usize,
    pub frames: usize,
    pub grid: usize,
    pub height: usize,
    pub width: usize,
    /// Ground-plane distance per frame.
    pub speed: f64,
    /// Std-dev of the per-frame position jitter.
    pub jitter: f64,
    pub blob_radius: f64,
    pub blob_amplitude: f64,
    pub background: f64,
    pub pixel_noise: f64,
    /// Chance that an agent is hidden from one camera in one frame.
    pub occlusion: f64,
    /// Per-camera `[a, b, c, d, e, f]` with `u = a x + b y + c`,
    /// `v = d x + e y + f` (pixel column/row from ground coordinates).
    /// Empty means the built-in rotated views.
    pub view_maps: Vec<[f64; 6]>,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            cameras: 2,
            agents: 3,
            frames: 2400,
            grid: 12,
            height: 32,
            width: 32,
            speed: 0.012,
            jitter: 0.002,
            blob_radius: 1.6,
            blob_amplitude: 130.0,
            background: 100.0,
            pixel_noise: 16.0,
            occlusion: 0.25,
            view_maps: Vec::new(),
            seed: 7,
        }
    }
}

impl WorldSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras == 0 || self.agents == 0 || self.grid < 4 {
            return Err(Error::Config("need cameras >= 1, agents >= 1, grid >= 4".into()));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("frames and image size must be positive".into()));
        }
        let max16 = usize::from(u16::MAX);
        if [self.cameras, self.grid, self.height, self.width].iter().any(|&v| v > max16)
            || self.frames > u32::MAX as usize
        {
            return Err(Error::Config("dimensions exceed the dataset header fields".into()));
        }
        if !(0.0..1.0).contains(&self.occlusion) {
            return Err(Error::Config("occlusion must lie in [0, 1)".into()));
        }
        let finite = [
            self.speed,
            self.jitter,
            self.blob_radius,
            self.blob_amplitude,
            self.background,
            self.pixel_noise,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || self.blob_radius == 0.0 {
            return Err(Error::Config("motion and rendering parameters must be finite and non-negative".into()));
        }
        if !self.view_maps.is_empty() && self.view_maps.len() != self.cameras {
            return Err(Error::Config(format!(
                "{} view maps for {} cameras",
                self.view_maps.len(),
                self.cameras
            )));
        }
        for (k, m) in self.views().iter().enumerate() {
            let det = m[0] * m[4] - m[1] * m[3];
            if det.abs() < 1e-9 || m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("view map of camera {k} is not invertible")));
            }
        }
        Ok(())
    }

    /// Camera `k` looks at the ground rotated by `k` quarter turns, with a
    /// slight per-camera shear.
    pub fn views(&self) -> Vec<[f64; 6]> {
        if !self.view_maps.is_empty() {
            return self.view_maps.clone();
        }
        let margin = 2.0;
        let su = self.width as f64 - 2.0 * margin;
        let sv = self.height as f64 - 2.0 * margin;
        (0..self.cameras)
            .map(|k| {
                let shear = 0.08 * (k as f64);
                // Ground (x, y) -> rotated unit square coordinates (p, q).
                let (p, q): ([f64; 3], [f64; 3]) = match k % 4 {
                    0 => ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
                    1 => ([0.0, -1.0, 1.0], [1.0, 0.0, 0.0]),
                    2 => ([-1.0, 0.0, 1.0], [0.0, -1.0, 1.0]),
                    _ => ([0.0, 1.0, 0.0], [-1.0, 0.0, 1.0]),
                };
                let s = su / (1.0 + shear);
                [
                    s * (p[0] + shear * q[0]),
                    s * (p[1] + shear * q[1]),
                    margin + s * (p[2] + shear * q[2]),
                    sv * q[0],
                    sv * q[1],
                    margin + sv * q[2],
                ]
            })
            .collect()
    }
}

/// Frames of a generated world, kept as the raw bytes written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cameras: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub grid: usize,
    pub seed: u64,
    /// Frame-major, then camera, then row-major pixels.
    pub images: Vec<u8>,
    /// Frame-major `grid x grid` cells, 1 = occupied.
    pub truth: Vec<u8>,
    /// The cameras' ground-to-pixel maps, as in [`WorldSpec::view_maps`].
    pub views: Vec<[f64; 6]>,
}

impl Dataset {
    fn image_len(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, t: usize, k: usize) -> &[u8] {
        let n = self.image_len();
        let start = (t * self.cameras + k) * n;
        &self.images[start..start + n]
    }

    pub fn truth(&self, t: usize) -> &[u8] {
        let n = self.grid * self.grid;
        &self.truth[t * n..(t + 1) * n]
    }

    pub fn truth_f64(&self, t: usize) -> Vec<f64> {
        self.truth(t).iter().map(|&c| f64::from(c)).collect()
    }

    /// Extractor input for frame `t` of camera `k`.
    pub fn frame_tensor(&self, t: usize, k: usize) -> Tensor {
        pixels_to_tensor(self.image(t, k), self.height, self.width)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 48 * self.cameras + self.images.len() + self.truth.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.cameras as u16).to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.grid as u16).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.views.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in 0..self.frames {
            for k in 0..self.cameras {
                out.extend_from_slice(self.image(t, k));
            }
            out.extend_from_slice(self.truth(t));
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN {
            return Err(Error::Truncated(format!(
                "dataset header: expected {HEADER_LEN} bytes, got {}",
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
        let u16_at = |o: usize| usize::from(u16::from_le_bytes([buf[o], buf[o + 1]]));
        let cameras = u16_at(5);
        let frames = u32::from_le_bytes(buf[7..11].try_into().unwrap()) as usize;
        let height = u16_at(11);
        let width = u16_at(13);
        let grid = u16_at(15);
        let seed = u64::from_le_bytes(buf[17..25].try_into().unwrap());
        let img = height * width;
        let per_frame = cameras * img + grid * grid;
        let body = HEADER_LEN + 48 * cameras;
        let expected = body + frames * per_frame;
        if buf.len() != expected {
            return Err(Error::LengthMismatch {
                what: "dataset".into(),
                expected,
                actual: buf.len(),
            });
        }
        let views = buf[HEADER_LEN..body]
            .chunks(48)
            .map(|c| std::array::from_fn(|i| f64::from_le_bytes(c[8 * i..8 * i + 8].try_into().unwrap())))
            .collect();
        let mut images = Vec::with_capacity(frames * cameras * img);
        let mut truth = Vec::with_capacity(frames * grid * grid);
        for t in 0..frames {
            let base = body + t * per_frame;
            images.extend_from_slice(&buf[base..base + cameras * img]);
            truth.extend_from_slice(&buf[base + cameras * img..base + per_frame]);
        }
        Ok(Self {
            cameras,
            frames,
            height,
            width,
            grid,
            seed,
            images,
            truth,
            views,
        })
    }

    /// Writes `dir/dataset.tocd`, creating `dir` if needed.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(dir.as_ref())?;
        std::fs::write(dir.as_ref().join(FILE_NAME), self.to_bytes())?;
        Ok(())
    }

    /// Reads a dataset directory, or a `.tocd` file directly.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let file = if p.is_dir() { p.join(FILE_NAME) } else { p.to_path_buf() };
        Self::from_bytes(&std::fs::read(file)?)
    }
}

pub fn pixels_to_tensor(px: &[u8], height: usize, width: usize) -> Tensor {
    Tensor::from_vec(
        &[1, height, width],
        px.iter().map(|&p| (f64::from(p) - PIXEL_CENTER) / PIXEL_SCALE).collect(),
    )
    .expect("pixel count matches image size")
}

fn reflect(p: &mut f64, v: &mut f64) {
    if *p < 0.0 {
        *p = -*p;
        *v = -*v;
    }
    if *p > 1.0 {
        *p = 2.0 - *p;
        *v = -*v;
    }
    *p = p.clamp(0.0, 1.0);
}

pub fn gen_dataset(spec: &WorldSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, spec.jitter).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, spec.pixel_noise).map_err(|e| Error::Config(e.to_string()))?;
    let views = spec.views();
    let (h, w, g) = (spec.height, spec.width, spec.grid);

    let mut pos: Vec<[f64; 2]> = (0..spec.agents)
        .map(|_| [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)])
        .collect();
    let mut vel: Vec<[f64; 2]> = (0..spec.agents)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            [spec.speed * a.cos(), spec.speed * a.sin()]
        })
        .collect();

    let mut images = Vec::with_capacity(spec.frames * spec.cameras * h * w);
    let mut truth = Vec::with_capacity(spec.frames * g * g);
    let two_r2 = 2.0 * spec.blob_radius * spec.blob_radius;
    for _ in 0..spec.frames {
        for (p, v) in pos.iter_mut().zip(vel.iter_mut()) {
            for d in 0..2 {
                p[d] += v[d] + jitter.sample(&mut rng);
                reflect(&mut p[d], &mut v[d]);
            }
        }
        for view in &views {
            let visible: Vec<(f64, f64)> = pos
                .iter()
                .filter_map(|p| {
                    let hidden = rng.random::<f64>() < spec.occlusion;
                    (!hidden).then(|| {
                        (
                            view[0] * p[0] + view[1] * p[1] + view[2],
                            view[3] * p[0] + view[4] * p[1] + view[5],
                        )
                    })
                })
                .collect();
            for row in 0..h {
                for col in 0..w {
                    let mut val = spec.background;
                    for &(u, v) in &visible {
                        let d2 = (col as f64 - u).powi(2) + (row as f64 - v).powi(2);
                        val += spec.blob_amplitude * (-d2 / two_r2).exp();
                    }
                    val += noise.sample(&mut rng);
                    images.push(val.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        let mut cells = vec![0u8; g * g];
        for p in &pos {
            let gx = ((p[0] * g as f64) as usize).min(g - 1);
            let gy = ((p[1] * g as f64) as usize).min(g - 1);
            cells[gy * g + gx] = 1;
        }
        truth.extend_from_slice(&cells);
    }
    Ok(Dataset {
        cameras: spec.cameras,
        frames: spec.frames,
        height: h,
        width: w,
        grid: g,
        seed: spec.seed,
        images,
        truth,
        views,
    })
}
