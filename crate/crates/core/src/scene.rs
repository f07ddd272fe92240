//! Procedural RGB-D scenes: a ground plane plus floating boxes and spheres,
//! rendered with a z-buffer through a pinhole camera.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Height of the camera above the ground plane, metres.
pub const CAMERA_HEIGHT: f64 = 1.5;
/// Standard deviation of the additive RGB noise.
pub const RGB_NOISE: f64 = 0.01;

const GROUND_ALBEDO: [f64; 3] = [0.55, 0.5, 0.45];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub n_objects: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 48,
            d_min: 0.5,
            d_max: 10.0,
            n_objects: 4,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "scene must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::Config(format!(
                "invalid depth bounds d_min={} d_max={}",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    /// Pinhole camera used to render: `fx = fy = height`, principal point at the image centre.
    pub fn camera(&self) -> Camera {
        Camera {
            fx: self.height as f64,
            fy: self.height as f64,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    /// Ray direction through the centre of pixel `(row, col)`, scaled so that z = 1.
    /// Camera frame: x right, y down, z forward.
    pub fn ray(&self, row: usize, col: usize) -> [f64; 3] {
        [
            (col as f64 + 0.5 - self.cx) / self.fx,
            (row as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Axis-aligned box given by its min and max corners.
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

impl Shape {
    /// Depth (z) of the nearest intersection of the z-normalised ray `dir`
    /// from the origin, if any lies in front of the camera.
    pub fn hit_depth(&self, dir: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Box { min, max } => {
                let mut t0 = 0.0_f64;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    if dir[a] == 0.0 {
                        if min[a] > 0.0 || max[a] < 0.0 {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = (min[a] / dir[a], max[a] / dir[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)
            }
            Shape::Sphere { center, radius } => {
                let a: f64 = dir.iter().map(|d| d * d).sum();
                let b: f64 = dir.iter().zip(&center).map(|(d, c)| d * c).sum();
                let c: f64 = center.iter().map(|v| v * v).sum::<f64>() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (b - disc.sqrt()) / a;
                (t > 0.0).then_some(t)
            }
        }
    }

    /// Conservative screen-space bounds `(row0, row1, col0, col1)`, half-open.
    fn screen_bounds(&self, cam: &Camera, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let (lo, hi) = match *self {
            Shape::Box { min, max } => (min, max),
            Shape::Sphere { center, radius } => (
                [center[0] - radius, center[1] - radius, center[2] - radius],
                [center[0] + radius, center[1] + radius, center[2] + radius],
            ),
        };
        let z_near = lo[2].max(1e-3);
        let mut us = [0.0; 8];
        let mut vs = [0.0; 8];
        let mut i = 0;
        for &x in &[lo[0], hi[0]] {
            for &y in &[lo[1], hi[1]] {
                for &z in &[z_near, hi[2].max(z_near)] {
                    us[i] = cam.cx + cam.fx * x / z;
                    vs[i] = cam.cy + cam.fy * y / z;
                    i += 1;
                }
            }
        }
        let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64) as usize;
        let umin = us.iter().cloned().fold(f64::INFINITY, f64::min).floor() - 1.0;
        let umax = us.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
        let vmin = vs.iter().cloned().fold(f64::INFINITY, f64::min).floor() - 1.0;
        let vmax = vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
        (clamp(vmin, h), clamp(vmax, h), clamp(umin, w), clamp(umax, w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[1, 3, H, W]`, values in `[0, 1]`.
    pub rgb: Tensor,
    /// `[1, 1, H, W]`, metres.
    pub depth: Tensor,
    pub seed: u64,
    pub params: SceneParams,
    pub objects: Vec<Object>,
}

/// Depth of the bare ground plane (or `d_max` above the horizon) for an image row.
pub fn ground_depth(params: &SceneParams, row: usize) -> f64 {
    let cam = params.camera();
    let dy = cam.ray(row, 0)[1];
    if dy <= 0.0 {
        params.d_max
    } else {
        (CAMERA_HEIGHT / dy).clamp(params.d_min, params.d_max)
    }
}

pub fn generate(seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let cam = params.camera();
    let mut rng = rng::seeded(seed);

    let objects: Vec<Object> = (0..params.n_objects)
        .map(|_| random_object(&mut rng, params, &cam))
        .collect();

    let mut zbuf: Vec<f64> = (0..h)
        .flat_map(|r| std::iter::repeat_n(ground_depth(params, r), w))
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for (k, obj) in objects.iter().enumerate() {
        let (r0, r1, c0, c1) = obj.shape.screen_bounds(&cam, h, w);
        for r in r0..r1 {
            for c in c0..c1 {
                if let Some(d) = obj.shape.hit_depth(cam.ray(r, c)) {
                    if d < zbuf[r * w + c] {
                        zbuf[r * w + c] = d;
                        owner[r * w + c] = Some(k);
                    }
                }
            }
        }
    }
    let depth: Vec<f64> = zbuf
        .into_iter()
        .map(|d| d.clamp(params.d_min, params.d_max))
        .collect();

    let noise = Normal::new(0.0, RGB_NOISE).expect("valid normal");
    let span = params.d_max - params.d_min;
    let mut rgb = vec![0.0; 3 * h * w];
    for ch in 0..3 {
        for i in 0..h * w {
            let albedo = match owner[i] {
                Some(k) => objects[k].albedo[ch],
                None => GROUND_ALBEDO[ch],
            };
            let nd = (depth[i] - params.d_min) / span;
            let v = albedo * (1.0 - nd) + noise.sample(&mut rng);
            rgb[ch * h * w + i] = v.clamp(0.0, 1.0);
        }
    }

    Ok(Scene {
        rgb: Tensor::new(vec![1, 3, h, w], rgb)?,
        depth: Tensor::new(vec![1, 1, h, w], depth)?,
        seed,
        params: *params,
        objects,
    })
}

/// `n` scenes with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_set(base_seed: u64, n: usize, params: &SceneParams) -> Result<Vec<Scene>> {
    (0..n as u64)
        .map(|i| generate(base_seed.wrapping_add(i), params))
        .collect()
}

fn random_object<R: Rng>(rng: &mut R, params: &SceneParams, cam: &Camera) -> Object {
    let z_hi = 0.5 * (params.d_min + params.d_max);
    let z = rng.random_range((params.d_min + 0.5).min(z_hi)..z_hi);
    // keep the centre inside the view frustum
    let half_w = cam.cx / cam.fx * z;
    let half_h = cam.cy / cam.fy * z;
    let x = rng.random_range(-0.8 * half_w..0.8 * half_w);
    let size = rng.random_range(0.3..1.2_f64);
    // objects float above the ground plane (y = CAMERA_HEIGHT, y down)
    let y_hi = (CAMERA_HEIGHT - size).max(-0.8 * half_h + 1e-3);
    let y = rng.random_range(-0.8 * half_h..y_hi);
    let albedo = [
        rng.random_range(0.3..1.0),
        rng.random_range(0.3..1.0),
        rng.random_range(0.3..1.0),
    ];
    let shape = if rng.random_bool(0.5) {
        let hx = 0.5 * size * rng.random_range(0.6..1.4);
        let hy = 0.5 * size * rng.random_range(0.6..1.4);
        let hz = 0.5 * size * rng.random_range(0.6..1.4);
        Shape::Box {
            min: [x - hx, y - hy, z],
            max: [x + hx, y + hy, z + 2.0 * hz],
        }
    } else {
        let r = 0.5 * size;
        Shape::Sphere {
            center: [x, y, z + r],
            radius: r,
        }
    };
    Object { shape, albedo }
}
