//! Reprojection rendering of the model and masked SSIM / PSNR scoring.

use serde::{Serialize, Serializer};

use crate::deformation::NodeGraph;
use crate::error::{Error, Result};
use crate::geometry::{project_unchecked, CameraIntrinsics, Point3, RigidPose};
use crate::imaging::{dims, GrayImage, RgbImage};
use crate::spatial::SpatialGrid;
use crate::surfel::{Surfel, SurfelMap};

pub const SSIM_TAPS: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const L: f64 = 255.0;
const C1: f64 = (0.01 * L) * (0.01 * L);
const C2: f64 = (0.03 * L) * (0.03 * L);

/// Model rendered into one camera.
#[derive(Debug, Clone)]
pub struct Rendering {
    pub image: RgbImage,
    /// True where some surfel landed.
    pub coverage: Vec<bool>,
    /// Camera-frame depth of the winning splat, `INFINITY` where uncovered.
    pub depth: Vec<f64>,
}

impl Rendering {
    pub fn coverage_fraction(&self) -> f64 {
        self.coverage.iter().filter(|&&c| c).count() as f64 / self.coverage.len().max(1) as f64
    }
}

/// Z-buffered disk splats of world-frame surfels seen from camera `pose`
/// (camera to world). Ties in depth keep the earlier surfel.
pub fn render_surfels(surfels: &[Surfel], pose: &RigidPose, k: &CameraIntrinsics) -> Rendering {
    let (w, h) = (k.width, k.height);
    let mut image = RgbImage::new(w as u32, h as u32);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut owner = vec![u32::MAX; w * h];
    let to_cam = pose.inverse();
    for (idx, s) in surfels.iter().enumerate() {
        let p = to_cam.apply(&s.position);
        if !(p.z > 0.0) {
            continue;
        }
        let c = project_unchecked(&p, k);
        let r = (s.radius * k.fx / p.z).max(0.5);
        let (u0, u1) = ((c.u - r).ceil().max(0.0), (c.u + r).floor().min(w as f64 - 1.0));
        let (v0, v1) = ((c.v - r).ceil().max(0.0), (c.v + r).floor().min(h as f64 - 1.0));
        if u0 > u1 || v0 > v1 {
            continue;
        }
        for v in v0 as usize..=v1 as usize {
            for u in u0 as usize..=u1 as usize {
                let (du, dv) = (u as f64 - c.u, v as f64 - c.v);
                if du * du + dv * dv > r * r {
                    continue;
                }
                let i = v * w + u;
                if p.z < depth[i] {
                    depth[i] = p.z;
                    owner[i] = idx as u32;
                }
            }
        }
    }
    let mut coverage = vec![false; w * h];
    for (i, &o) in owner.iter().enumerate() {
        if o != u32::MAX {
            coverage[i] = true;
            image.as_mut()[3 * i..3 * i + 3].copy_from_slice(&surfels[o as usize].color_u8());
        }
    }
    Rendering { image, coverage, depth }
}

/// Surfels of the canonical map carried into the deformed frame by `g`.
/// Points the graph does not support keep their canonical placement.
pub fn warp_surfels(map: &SurfelMap, g: &NodeGraph) -> Vec<Surfel> {
    use rayon::prelude::*;
    map.surfels
        .par_iter()
        .map(|s| match g.skin(&s.position) {
            Some(skin) => Surfel {
                position: g.warp_point_with(&s.position, &skin),
                normal: g.warp_normal_with(&s.normal, &skin),
                ..s.clone()
            },
            None => s.clone(),
        })
        .collect()
}

/// Warps the canonical model by `g` and renders it from `pose`.
pub fn render_reprojection(map: &SurfelMap, g: &NodeGraph, pose: &RigidPose, k: &CameraIntrinsics) -> Rendering {
    render_surfels(&warp_surfels(map, g), pose, k)
}

fn gaussian_kernel() -> [f64; SSIM_TAPS] {
    let mut g = [0.0; SSIM_TAPS];
    let c = (SSIM_TAPS / 2) as f64;
    for (i, x) in g.iter_mut().enumerate() {
        *x = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|x| x / s)
}

/// Separable convolution with zero padding.
fn blur(src: &[f64], w: usize, h: usize, g: &[f64; SSIM_TAPS]) -> Vec<f64> {
    let r = (SSIM_TAPS / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, gk) in g.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += gk * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, gk) in g.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += gk * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn check_inputs(a: &GrayImage, b: &GrayImage, include: &[bool]) -> Result<(usize, usize)> {
    let (w, h) = dims(a);
    if dims(b) != (w, h) || include.len() != w * h {
        return Err(Error::InvalidInput(format!(
            "metric inputs differ in size: {}x{}, {}x{}, mask {}",
            w,
            h,
            b.width(),
            b.height(),
            include.len()
        )));
    }
    if !include.iter().any(|&m| m) {
        return Err(Error::UndefinedMetric("no pixels included".into()));
    }
    Ok((w, h))
}

/// SSIM over included pixels. Local statistics use an 11-tap Gaussian
/// (σ 1.5) renormalized over the included pixels of each window, so values
/// at excluded pixels never enter the result.
pub fn ssim(a: &GrayImage, b: &GrayImage, include: &[bool]) -> Result<f64> {
    let (w, h) = check_inputs(a, b, include)?;
    let g = gaussian_kernel();
    let m: Vec<f64> = include.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
    let mask_val = |img: &GrayImage| -> Vec<f64> {
        img.as_raw().iter().zip(include).map(|(&p, &inc)| if inc { p as f64 } else { 0.0 }).collect()
    };
    let (x, y) = (mask_val(a), mask_val(b));
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(a, b)| a * b).collect() };
    let wm = blur(&m, w, h, &g);
    let sx = blur(&x, w, h, &g);
    let sy = blur(&y, w, h, &g);
    let sxx = blur(&prod(&x, &x), w, h, &g);
    let syy = blur(&prod(&y, &y), w, h, &g);
    let sxy = blur(&prod(&x, &y), w, h, &g);
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..w * h {
        if !include[i] {
            continue;
        }
        let (mx, my) = (sx[i] / wm[i], sy[i] / wm[i]);
        let vx = sxx[i] / wm[i] - mx * mx;
        let vy = syy[i] / wm[i] - my * my;
        let cxy = sxy[i] / wm[i] - mx * my;
        let num = (2.0 * mx * my + C1) * (2.0 * cxy + C2);
        let den = (mx * mx + my * my + C1) * (vx + vy + C2);
        total += num / den;
        n += 1;
    }
    Ok(total / n as f64)
}

/// `10 log10(255² / MSE)` over included pixels; identical inputs give `INFINITY`.
pub fn psnr(a: &GrayImage, b: &GrayImage, include: &[bool]) -> Result<f64> {
    check_inputs(a, b, include)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((&p, &q), &inc) in a.as_raw().iter().zip(b.as_raw()).zip(include) {
        if inc {
            let d = p as f64 - q as f64;
            sum += d * d;
            n += 1;
        }
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (L * L / mse).log10() })
}

/// Pixels scored for a frame: not tool and covered by the rendering.
pub fn evaluation_mask(tool: &[bool], coverage: &[bool]) -> Vec<bool> {
    tool.iter().zip(coverage).map(|(&t, &c)| !t && c).collect()
}

fn ser_db<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    /// `None` when no pixel was scored.
    pub ssim: Option<f64>,
    #[serde(serialize_with = "ser_db")]
    pub psnr: Option<f64>,
    pub included_pixels: usize,
    /// Fraction of pixels covered by the rendering.
    pub coverage: f64,
}

/// Scores one rendered frame against the observed one on luma.
pub fn frame_metrics(frame: usize, observed: &GrayImage, rendered: &GrayImage, tool: &[bool], coverage: &[bool]) -> Result<FrameMetrics> {
    let include = evaluation_mask(tool, coverage);
    let included_pixels = include.iter().filter(|&&x| x).count();
    let cov = coverage.iter().filter(|&&c| c).count() as f64 / coverage.len().max(1) as f64;
    let (ssim, psnr) = match (ssim(observed, rendered, &include), psnr(observed, rendered, &include)) {
        (Ok(s), Ok(p)) => (Some(s), Some(p)),
        (Err(Error::UndefinedMetric(_)), _) | (_, Err(Error::UndefinedMetric(_))) => (None, None),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    Ok(FrameMetrics {
        frame,
        ssim,
        psnr,
        included_pixels,
        coverage: cov,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_frame: Vec<FrameMetrics>,
    pub ssim_a: f64,
    #[serde(serialize_with = "ser_db_plain")]
    pub psnr_a: f64,
    pub excluded_frames: usize,
}

fn ser_db_plain<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    ser_db(&Some(*v), s)
}

/// Means over frames with defined metrics.
pub fn aggregate(per_frame: Vec<FrameMetrics>) -> Result<MetricsReport> {
    let defined: Vec<(f64, f64)> = per_frame.iter().filter_map(|f| Some((f.ssim?, f.psnr?))).collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no frame has defined metrics".into()));
    }
    let n = defined.len() as f64;
    let ssim_a = defined.iter().map(|d| d.0).sum::<f64>() / n;
    let psnr_a = defined.iter().map(|d| d.1).sum::<f64>() / n;
    Ok(MetricsReport {
        excluded_frames: per_frame.len() - defined.len(),
        per_frame,
        ssim_a,
        psnr_a,
    })
}

/// Fraction of `truth` points with some model point within `radius`.
pub fn surface_coverage(model: &[Point3], truth: &[Point3], radius: f64) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let grid = SpatialGrid::from_points(radius, model.iter().copied());
    truth.iter().filter(|p| grid.any_within(p, radius)).count() as f64 / truth.len() as f64
}
