//! Sparse depth observations synthesised from dense ground truth.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::scene::Camera;
use crate::tensor::Tensor;

/// Depth values paired with a binary validity mask; `values = mask ⊙ depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepth {
    /// `[1, 1, H, W]`, zero where invalid.
    pub values: Tensor,
    /// `[1, 1, H, W]`, elements in {0, 1}.
    pub mask: Tensor,
}

impl SparseDepth {
    pub fn from_mask(depth: &Tensor, mask: Tensor) -> Result<Self> {
        if depth.shape() != mask.shape() {
            return Err(Error::Shape {
                op: "sparse depth",
                lhs: depth.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Config("mask elements must be 0 or 1".into()));
        }
        let values = Tensor::new(
            depth.shape().to_vec(),
            depth.data().iter().zip(mask.data()).map(|(d, m)| d * m).collect(),
        )?;
        Ok(Self { values, mask })
    }

    /// No observations at all.
    pub fn empty(shape: &[usize]) -> Self {
        Self {
            values: Tensor::zeros(shape),
            mask: Tensor::zeros(shape),
        }
    }

    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }

    pub fn density(&self) -> f64 {
        self.count() as f64 / self.mask.len() as f64
    }
}

/// Exactly `n` distinct pixels drawn uniformly without replacement.
pub fn sample_uniform(depth: &Tensor, n: usize, seed: u64) -> Result<SparseDepth> {
    let total = depth.len();
    if n > total {
        return Err(Error::Config(format!(
            "cannot sample {n} points from {total} pixels"
        )));
    }
    let mut rng = rng::derived(seed, 0x554e_4946);
    let mut mask = Tensor::zeros(depth.shape());
    for i in index::sample(&mut rng, total, n) {
        mask.data_mut()[i] = 1.0;
    }
    SparseDepth::from_mask(depth, mask)
}

/// Geometry of a spinning multi-beam LiDAR.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarSpec {
    pub name: String,
    /// Total vertical field of view, degrees.
    pub fov_deg: f64,
    /// Vertical angular resolution, degrees.
    pub vres_deg: f64,
    /// Std of the per-scanline elevation jitter, degrees.
    pub rot_noise_deg: f64,
    /// Sensor height above the camera centre, metres.
    pub mount_height_m: f64,
    /// Elevation of the middle of the field of view, degrees (positive up).
    pub pitch_center_deg: f64,
}

pub const DEFAULT_ROT_NOISE_DEG: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LidarPreset {
    Vlp16,
    Vlp32c,
    Hdl32e,
    Hdl64e,
}

impl LidarPreset {
    pub const ALL: [LidarPreset; 4] = [
        LidarPreset::Vlp16,
        LidarPreset::Vlp32c,
        LidarPreset::Hdl32e,
        LidarPreset::Hdl64e,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LidarPreset::Vlp16 => "VLP-16",
            LidarPreset::Vlp32c => "VLP-32C",
            LidarPreset::Hdl32e => "HDL-32E",
            LidarPreset::Hdl64e => "HDL-64E",
        }
    }

    /// Field of view and resolution per the sensor datasheets; the pitch
    /// centre reflects each sensor's asymmetric elevation layout
    /// (VLP-16 ±15°, VLP-32C +15/−25°, HDL-32E +10.67/−30.67°, HDL-64E +2/−24.9°).
    pub fn spec(self) -> LidarSpec {
        let (fov_deg, vres_deg, pitch_center_deg) = match self {
            LidarPreset::Vlp16 => (30.0, 2.0, 0.0),
            LidarPreset::Vlp32c => (40.0, 0.3, -5.0),
            LidarPreset::Hdl32e => (41.0, 1.3, -10.0),
            LidarPreset::Hdl64e => (27.0, 0.4, -11.5),
        };
        LidarSpec {
            name: self.name().to_string(),
            fov_deg,
            vres_deg,
            rot_noise_deg: DEFAULT_ROT_NOISE_DEG,
            mount_height_m: 0.0,
            pitch_center_deg,
        }
    }
}

impl fmt::Display for LidarPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LidarPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "vlp16" => Ok(LidarPreset::Vlp16),
            "vlp32c" => Ok(LidarPreset::Vlp32c),
            "hdl32e" => Ok(LidarPreset::Hdl32e),
            "hdl64e" => Ok(LidarPreset::Hdl64e),
            _ => Err(Error::Config(format!(
                "unknown lidar preset '{s}' (expected VLP-16, VLP-32C, HDL-32E or HDL-64E)"
            ))),
        }
    }
}

impl LidarSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.vres_deg > 0.0) {
            return Err(Error::Config(format!(
                "lidar fov ({}) and vres ({}) must be positive",
                self.fov_deg, self.vres_deg
            )));
        }
        if self.rot_noise_deg.is_nan() || self.rot_noise_deg < 0.0 {
            return Err(Error::Config("rotation noise must be non-negative".into()));
        }
        Ok(())
    }

    /// `floor(fov / vres) + 1`.
    pub fn channels(&self) -> usize {
        // tolerate fov/vres landing a hair below an integer
        (self.fov_deg / self.vres_deg + 1e-9).floor() as usize + 1
    }

    /// Nominal elevation of each channel, degrees, bottom to top.
    pub fn elevations(&self) -> Vec<f64> {
        let bottom = self.pitch_center_deg - 0.5 * self.fov_deg;
        (0..self.channels())
            .map(|c| bottom + c as f64 * self.vres_deg)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarSample {
    pub sparse: SparseDepth,
    pub scanlines: usize,
}

/// Projects every scanline of `spec` into the image and keeps the depth of
/// each pixel it crosses.
///
/// A beam at elevation `θ` and azimuth `φ` reaches image row
/// `v = cy − fy·(tan θ / cos φ + h / d)` at the column whose centre has
/// azimuth `φ`, with `h` the mount height and `d` the depth there.
/// Each channel's jitter is drawn from a stream keyed by its nominal
/// elevation, so a finer resolution keeps every coarser scanline unchanged.
pub fn sample_lidar(depth: &Tensor, spec: &LidarSpec, camera: &Camera, seed: u64) -> Result<LidarSample> {
    spec.validate()?;
    if camera.fx == 0.0 || camera.fy == 0.0 || !camera.fx.is_finite() || !camera.fy.is_finite() {
        return Err(Error::Config(format!(
            "degenerate intrinsics fx={} fy={}",
            camera.fx, camera.fy
        )));
    }
    let (_, _, h, w) = depth.dims4()?;
    let d = depth.data();
    let mut mask = Tensor::zeros(depth.shape());
    let bottom = spec.pitch_center_deg - 0.5 * spec.fov_deg;
    let elevations = spec.elevations();
    for &nominal in &elevations {
        let key = ((nominal - bottom) * 1e6).round() as i64 as u64;
        let jitter = if spec.rot_noise_deg > 0.0 {
            let mut r = rng::derived(seed, key);
            Normal::new(0.0, spec.rot_noise_deg)
                .expect("valid std")
                .sample(&mut r)
        } else {
            0.0
        };
        let tan_el = (nominal + jitter).to_radians().tan();
        for col in 0..w {
            let sec_phi = (1.0 + ((col as f64 + 0.5 - camera.cx) / camera.fx).powi(2)).sqrt();
            let slope = tan_el * sec_phi;
            let mut v = camera.cy - camera.fy * slope;
            if spec.mount_height_m != 0.0 {
                // parallax depends on the depth being hit; two fixed-point passes
                for _ in 0..2 {
                    let row = v.floor();
                    if row < 0.0 || row >= h as f64 {
                        break;
                    }
                    let dv = d[row as usize * w + col];
                    if dv <= 0.0 {
                        break;
                    }
                    v = camera.cy - camera.fy * (slope + spec.mount_height_m / dv);
                }
            }
            let row = v.floor();
            if row >= 0.0 && row < h as f64 {
                mask.data_mut()[row as usize * w + col] = 1.0;
            }
        }
    }
    Ok(LidarSample {
        sparse: SparseDepth::from_mask(depth, mask)?,
        scanlines: elevations.len(),
    })
}
