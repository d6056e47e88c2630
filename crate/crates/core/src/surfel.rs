//! Surfels, the canonical surfel map and per-frame observation building.

use rayon::prelude::*;

use crate::geometry::{backproject_unchecked, CameraIntrinsics, Pixel, Point3, RigidPose, Vec3};
use crate::imaging::RgbImage;
use crate::stereo::DepthMap;

/// Width of the radial confidence falloff, in normalized image units.
pub const CONFIDENCE_SIGMA: f64 = 0.6;
/// Upper bound on the obliquity factor `1 / |n · ray|` used for the radius.
pub const MAX_OBLIQUITY: f64 = 4.0;
/// Marks "no surfel" in pixel index maps.
pub const NO_SURFEL: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Surfel {
    pub position: Point3,
    pub normal: Vec3,
    pub confidence: f64,
    pub last_seen: usize,
    pub radius: f64,
    /// Linear RGB in `[0, 255]`.
    pub color: [f32; 3],
}

impl Surfel {
    pub fn color_u8(&self) -> [u8; 3] {
        self.color.map(|c| c.round().clamp(0.0, 255.0) as u8)
    }

    /// Same surfel expressed in another frame.
    pub fn transformed(&self, pose: &RigidPose) -> Surfel {
        Surfel {
            position: pose.apply(&self.position),
            normal: pose.rotate(&self.normal),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.normal.iter()).all(|x| x.is_finite())
            && self.confidence.is_finite()
            && self.radius.is_finite()
    }
}

/// Surfels in a common reference frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfelMap {
    pub surfels: Vec<Surfel>,
    /// Frame whose camera defines the coordinates (0 for the canonical model).
    pub reference_frame: usize,
    pub current_frame: usize,
}

impl SurfelMap {
    pub fn new(reference_frame: usize) -> Self {
        Self {
            surfels: Vec::new(),
            reference_frame,
            current_frame: reference_frame,
        }
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn total_confidence(&self) -> f64 {
        self.surfels.iter().map(|s| s.confidence).sum()
    }
}

/// Gaussian falloff of the normalized radial distance from the principal point.
pub fn initial_confidence(p: Pixel, k: &CameraIntrinsics) -> f64 {
    let x = (p.u - k.cx) / k.fx;
    let y = (p.v - k.cy) / k.fy;
    (-(x * x + y * y) / (2.0 * CONFIDENCE_SIGMA * CONFIDENCE_SIGMA)).exp()
}

/// Per-pixel camera-frame normals from differences `step` pixels apart,
/// one-sided at the border. Pixels with a missing neighbor, or across a depth
/// jump larger than `max_jump · depth`, get `None`.
pub fn compute_normals(d: &DepthMap, k: &CameraIntrinsics, step: usize, max_jump: f64) -> Vec<Option<Vec3>> {
    let (w, h) = (d.width, d.height);
    let s = step.max(1);
    let mut out = vec![None; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        for (u, slot) in row.iter_mut().enumerate() {
            *slot = normal_at(d, k, u, v, s, max_jump);
        }
    });
    out
}

fn normal_at(d: &DepthMap, k: &CameraIntrinsics, u: usize, v: usize, s: usize, max_jump: f64) -> Option<Vec3> {
    // Central differences, one-sided at the image border.
    let (u0, u1) = (u.saturating_sub(s), (u + s).min(d.width - 1));
    let (v0, v1) = (v.saturating_sub(s), (v + s).min(d.height - 1));
    if u0 == u1 || v0 == v1 {
        return None;
    }
    let z = d.get(u, v)?;
    let limit = max_jump * z;
    let point = |uu: usize, vv: usize| -> Option<Point3> {
        let zz = d.get(uu, vv)?;
        ((zz - z).abs() <= limit).then(|| backproject_unchecked(Pixel::new(uu as f64, vv as f64), zz, k))
    };
    let du = point(u1, v)? - point(u0, v)?;
    let dv = point(u, v1)? - point(u, v0)?;
    let n = du.cross(&dv);
    let len = n.norm();
    if !(len > 0.0) || !len.is_finite() {
        return None;
    }
    let n = n / len;
    let ray = backproject_unchecked(Pixel::new(u as f64, v as f64), z, k);
    Some(if n.dot(&ray) > 0.0 { -n } else { n })
}

/// Surfels built from one masked depth frame.
#[derive(Debug, Clone)]
pub struct Observation {
    /// Surfels in the frame given by the pose passed to [`build_observation`].
    pub map: SurfelMap,
    /// Source pixel (`v · width + u`) of each surfel.
    pub pixels: Vec<u32>,
    /// Surfel index per image pixel, or [`NO_SURFEL`].
    pub index: Vec<u32>,
    /// Camera-frame depth of each surfel.
    pub depths: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub stride: usize,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Surfel at the sampled pixel nearest to `(u, v)`.
    pub fn surfel_near(&self, u: f64, v: f64) -> Option<usize> {
        let s = self.stride as f64;
        let gu = ((u / s).round() * s) as isize;
        let gv = ((v / s).round() * s) as isize;
        if gu < 0 || gv < 0 || gu >= self.width as isize || gv >= self.height as isize {
            return None;
        }
        let i = self.index[gv as usize * self.width + gu as usize];
        (i != NO_SURFEL).then_some(i as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationParams {
    /// Sample every `stride`-th pixel in both directions.
    pub stride: usize,
    /// Pixel offset of the central differences used for normals.
    pub normal_step: usize,
    /// Relative depth jump that breaks a normal stencil.
    pub max_jump: f64,
}

impl Default for ObservationParams {
    fn default() -> Self {
        Self {
            stride: 1,
            normal_step: 1,
            max_jump: 0.05,
        }
    }
}

/// One surfel per valid sampled pixel with a valid normal.
pub fn build_observation(
    d: &DepthMap,
    color: &RgbImage,
    k: &CameraIntrinsics,
    pose: &RigidPose,
    t: usize,
    params: &ObservationParams,
) -> Observation {
    let (w, h) = (d.width, d.height);
    let stride = params.stride.max(1);
    let step = params.normal_step.max(1);
    let rows: Vec<Vec<(u32, Surfel, f64)>> = (0..h)
        .into_par_iter()
        .step_by(stride)
        .map(|v| {
            let mut out = Vec::new();
            for u in (0..w).step_by(stride) {
                let i = v * w + u;
                let (Some(z), Some(n)) = (d.get(u, v), normal_at(d, k, u, v, step, params.max_jump)) else {
                    continue;
                };
                let px = Pixel::new(u as f64, v as f64);
                let p = backproject_unchecked(px, z, k);
                let ray = p / p.norm();
                let obliquity = (1.0 / n.dot(&ray).abs()).min(MAX_OBLIQUITY);
                let radius = z / k.fx * std::f64::consts::SQRT_2 * obliquity * stride as f64;
                let c = color.get_pixel(u as u32, v as u32).0;
                let s = Surfel {
                    position: pose.apply(&p),
                    normal: pose.rotate(&n),
                    confidence: initial_confidence(px, k),
                    last_seen: t,
                    radius,
                    color: c.map(|x| x as f32),
                };
                out.push((i as u32, s, z));
            }
            out
        })
        .collect();

    let mut map = SurfelMap::new(t);
    let mut pixels = Vec::new();
    let mut depths = Vec::new();
    let mut index = vec![NO_SURFEL; w * h];
    for (i, s, z) in rows.into_iter().flatten() {
        index[i as usize] = map.surfels.len() as u32;
        pixels.push(i);
        depths.push(z);
        map.surfels.push(s);
    }
    Observation {
        map,
        pixels,
        index,
        depths,
        width: w,
        height: h,
        stride,
    }
}
