//! Synthetic stereo scenes with full ground truth: a textured height-field
//! tissue surface that deforms over time, a rigid box-shaped tool, a moving
//! camera and an optional smoke layer.
//!
//! World coordinates coincide with the first keyframe camera when that
//! keyframe is the identity, which all presets use. The surface is
//! `z(x, y, t) = z0 + relief(x, y) + deformation(x, y, t)` and each pixel is
//! rendered by intersecting its ray with the box and the height field.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{so3_exp, so3_log, CameraIntrinsics, Point3, RigidPose, Vec3};
use crate::imaging::RgbImage;
use crate::segmentation::ToolMask;
use crate::stereo::DepthMap;

pub const PRESET_NAMES: [&str; 8] = [
    "static",
    "deform_only",
    "tool_sweep",
    "camera_arc",
    "full_dynamic",
    "smoky",
    "plane",
    "bump",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeformationKind {
    /// `A sin(2πx/λ) sin(2πft)`.
    Wave,
    /// `A exp(−r²/(2λ²)) sin(2πft)` around the world z-axis.
    Bump,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformationSpec {
    pub kind: DeformationKind,
    /// Meters.
    pub amplitude: f64,
    /// Hz.
    pub frequency: f64,
    /// Wavelength for waves, width for bumps (meters).
    pub wavelength: f64,
}

/// Camera-to-world pose as axis-angle rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraKeyframe {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl CameraKeyframe {
    pub fn identity() -> Self {
        Self {
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn pose(&self) -> RigidPose {
        RigidPose::from_axis_angle(Vec3::from(self.rotation), Vec3::from(self.translation))
    }

    pub fn from_pose(p: &RigidPose) -> Self {
        Self {
            rotation: so3_log(&p.rotation).into(),
            translation: p.translation.into(),
        }
    }
}

/// Axis-aligned box moving through keyframed centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccluderSpec {
    pub half_extents: [f64; 3],
    /// Box centers, spread evenly over the sequence.
    pub path: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub frames: usize,
    pub fps: f64,
    pub intrinsics: CameraIntrinsics,
    /// Base depth of the surface (meters).
    pub z0: f64,
    /// Amplitude of the static relief (meters).
    pub relief: f64,
    pub relief_wavelength: f64,
    /// Size of the finest texture feature (meters).
    pub texture_scale: f64,
    pub deformation: DeformationSpec,
    /// Spread evenly over the sequence; one keyframe means a fixed camera.
    pub camera: Vec<CameraKeyframe>,
    pub occluder: Option<OccluderSpec>,
    /// Peak smoke opacity in `[0, 1]`.
    pub smoke_opacity: f64,
}

/// Calibration used by all presets: 640×512, fx = fy = 500, 5 mm baseline.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 319.5, 255.5, 0.005, 640, 512).expect("valid default intrinsics")
}

impl SceneConfig {
    fn base(seed: u64, frames: usize) -> Self {
        Self {
            seed,
            frames,
            fps: 30.0,
            intrinsics: default_intrinsics(),
            z0: 0.1,
            relief: 0.003,
            relief_wavelength: 0.05,
            texture_scale: 0.0008,
            deformation: DeformationSpec {
                kind: DeformationKind::Wave,
                amplitude: 0.0,
                frequency: 0.25,
                wavelength: 0.05,
            },
            camera: vec![CameraKeyframe::identity()],
            occluder: None,
            smoke_opacity: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let d = &self.deformation;
        let ok = self.frames >= 1
            && self.fps > 0.0
            && self.z0 > 0.0
            && self.relief >= 0.0
            && self.relief_wavelength > 0.0
            && self.texture_scale > 0.0
            && d.amplitude >= 0.0
            && d.wavelength > 0.0
            && d.frequency.is_finite()
            && (0.0..=1.0).contains(&self.smoke_opacity)
            && !self.camera.is_empty();
        if !ok {
            return Err(Error::Config("scene parameters out of range".into()));
        }
        if let Some(o) = &self.occluder {
            if o.path.is_empty() || o.half_extents.iter().any(|&h| !(h > 0.0)) {
                return Err(Error::Config("occluder needs a path and positive size".into()));
            }
        }
        // The highest surface point must stay in front of every camera.
        let top = self.z0 - self.relief - d.amplitude;
        for i in 0..self.frames {
            let pose = self.camera_pose(i);
            let axis = pose.rotation.column(2);
            if pose.translation.z >= top || axis.z < 0.5 {
                return Err(Error::Config(format!("camera at frame {i} does not face the surface")));
            }
        }
        Ok(())
    }

    fn phase(&self, i: usize, keys: usize) -> (usize, f64) {
        if keys <= 1 || self.frames <= 1 {
            return (0, 0.0);
        }
        let s = i as f64 / (self.frames - 1) as f64 * (keys - 1) as f64;
        let k = (s.floor() as usize).min(keys - 2);
        (k, s - k as f64)
    }

    /// Camera-to-world pose at frame `i`.
    pub fn camera_pose(&self, i: usize) -> RigidPose {
        let (k, f) = self.phase(i, self.camera.len());
        let a = self.camera[k].pose();
        if self.camera.len() == 1 || f == 0.0 {
            return a;
        }
        let b = self.camera[k + 1].pose();
        let rel = so3_log(&(a.rotation.transpose() * b.rotation));
        RigidPose::new(a.rotation * so3_exp(&(rel * f)), a.translation * (1.0 - f) + b.translation * f)
    }

    pub fn occluder_center(&self, i: usize) -> Option<Point3> {
        let o = self.occluder.as_ref()?;
        let (k, f) = self.phase(i, o.path.len());
        let a = Point3::from(o.path[k]);
        if o.path.len() == 1 {
            return Some(a);
        }
        Some(a * (1.0 - f) + Point3::from(o.path[k + 1]) * f)
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.fps
    }
}

/// Named scenario. Unknown names are a config error.
pub fn preset(name: &str, seed: u64) -> Result<SceneConfig> {
    let mut c = SceneConfig::base(seed, 30);
    let arc = |degrees: f64| -> Vec<CameraKeyframe> {
        // Rotation about the world y-axis through the surface point on the optical axis.
        let pivot = Point3::new(0.0, 0.0, 0.1);
        (0..=10)
            .map(|k| {
                let a = (degrees * k as f64 / 10.0).to_radians();
                let r = RigidPose::from_axis_angle(Vec3::new(0.0, a, 0.0), Vec3::zeros());
                let t = pivot - r.apply(&pivot);
                CameraKeyframe::from_pose(&RigidPose::new(r.rotation, t))
            })
            .collect()
    };
    let shaft = |from: f64, to: f64| OccluderSpec {
        half_extents: [0.007, 0.08, 0.004],
        path: vec![[from, 0.0, 0.065], [to, 0.0, 0.065]],
    };
    match name {
        "static" => {}
        "plane" => {
            c.frames = 10;
            c.relief = 0.0;
        }
        "deform_only" => {
            c.frames = 60;
            c.deformation.amplitude = 0.003;
        }
        "tool_sweep" => {
            c.frames = 60;
            c.occluder = Some(shaft(-0.025, 0.075));
        }
        "camera_arc" => {
            c.frames = 120;
            c.camera = arc(10.0);
        }
        "full_dynamic" => {
            c.frames = 120;
            c.deformation.amplitude = 0.002;
            c.camera = arc(10.0);
            c.occluder = Some(shaft(-0.06, 0.07));
        }
        "smoky" => {
            c.frames = 60;
            c.deformation.amplitude = 0.002;
            c.smoke_opacity = 0.35;
        }
        "bump" => {
            c.frames = 10;
            c.deformation = DeformationSpec {
                kind: DeformationKind::Bump,
                amplitude: 0.005,
                // Peaks at the last frame.
                frequency: 30.0 / (4.0 * 9.0),
                wavelength: 0.015,
            };
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (expected one of {})",
                PRESET_NAMES.join(", ")
            )))
        }
    }
    Ok(c)
}

/// All presets with the given seed.
pub fn scenario_presets(seed: u64) -> Vec<(&'static str, SceneConfig)> {
    PRESET_NAMES.iter().map(|&n| (n, preset(n, seed).expect("known preset"))).collect()
}

/// Smooth lattice noise in `[0, 1]` with quintic interpolation.
#[derive(Debug, Clone)]
struct ValueNoise {
    size: usize,
    table: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, size: usize) -> Self {
        Self {
            size,
            table: (0..size * size).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn at(&self, i: i64, j: i64) -> f64 {
        let n = self.size as i64;
        self.table[(j.rem_euclid(n) * n + i.rem_euclid(n)) as usize]
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x.floor(), y.floor());
        let (i, j) = (fx as i64, fy as i64);
        let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
        let (sx, sy) = (fade(x - fx), fade(y - fy));
        let a = self.at(i, j) + (self.at(i + 1, j) - self.at(i, j)) * sx;
        let b = self.at(i, j + 1) + (self.at(i + 1, j + 1) - self.at(i, j + 1)) * sx;
        a + (b - a) * sy
    }

    /// Four octaves, coarsest first, normalized to `[0, 1]`.
    fn fbm(&self, x: f64, y: f64) -> f64 {
        let (mut sum, mut amp, mut freq, mut norm) = (0.0, 1.0, 1.0, 0.0);
        for o in 0..4 {
            let off = 17.31 * o as f64;
            sum += amp * self.sample(x * freq + off, y * freq - off);
            norm += amp;
            amp *= 0.55;
            freq *= 2.0;
        }
        sum / norm
    }
}

/// Everything the simulator knows about one frame.
#[derive(Debug, Clone)]
pub struct GroundTruthFrame {
    pub index: usize,
    pub left: RgbImage,
    pub right: RgbImage,
    /// Left-view depth of whatever is visible, tool included.
    pub depth: DepthMap,
    /// Left-view pixels where the tool is nearest.
    pub tool_mask: ToolMask,
    /// Left-view pixels whose visible point the right camera cannot see.
    pub single_view: Vec<bool>,
    /// Camera-to-world pose of the left camera.
    pub pose: RigidPose,
    /// World positions of tissue visible (tool ignored) to both cameras,
    /// sampled every [`SURFACE_SAMPLE_STRIDE`] pixels of the left view.
    pub surface_points: Vec<Point3>,
}

pub const SURFACE_SAMPLE_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Hit {
    Tissue(f64),
    Tool(f64),
}

impl Hit {
    fn depth(self) -> f64 {
        match self {
            Hit::Tissue(s) | Hit::Tool(s) => s,
        }
    }
}

/// Deterministic renderer for one scene.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SceneConfig,
    tissue: ValueNoise,
    tool: ValueNoise,
    smoke: ValueNoise,
    relief_phase: [f64; 3],
}

impl Simulator {
    pub fn new(cfg: SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let tissue = ValueNoise::new(&mut rng, 512);
        let tool = ValueNoise::new(&mut rng, 128);
        let smoke = ValueNoise::new(&mut rng, 64);
        let relief_phase = [
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
        Ok(Self {
            cfg,
            tissue,
            tool,
            smoke,
            relief_phase,
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.cfg.frames
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.frames == 0
    }

    /// Surface height and its gradient at time `t`.
    pub fn height(&self, x: f64, y: f64, t: f64) -> (f64, f64, f64) {
        use std::f64::consts::TAU;
        let c = &self.cfg;
        let l = c.relief_wavelength;
        let p = &self.relief_phase;
        let (k1, k2, k3) = (TAU / l, TAU / (1.3 * l), TAU / (0.8 * l));
        let (a1, b1) = ((k1 * x + p[0]).sin(), (k2 * y + p[1]).cos());
        let a3 = (k3 * (x + y) + p[2]).sin();
        let mut h = c.z0 + c.relief * (0.6 * a1 * b1 + 0.4 * a3);
        let mut hx = c.relief * (0.6 * k1 * (k1 * x + p[0]).cos() * b1 + 0.4 * k3 * (k3 * (x + y) + p[2]).cos());
        let mut hy = c.relief * (-0.6 * a1 * k2 * (k2 * y + p[1]).sin() + 0.4 * k3 * (k3 * (x + y) + p[2]).cos());
        let d = &c.deformation;
        if d.amplitude > 0.0 {
            let s = d.amplitude * (TAU * d.frequency * t).sin();
            match d.kind {
                DeformationKind::Wave => {
                    let k = TAU / d.wavelength;
                    h += s * (k * x).sin();
                    hx += s * k * (k * x).cos();
                }
                DeformationKind::Bump => {
                    let w2 = d.wavelength * d.wavelength;
                    let g = (-(x * x + y * y) / (2.0 * w2)).exp();
                    h += s * g;
                    hx += -s * g * x / w2;
                    hy += -s * g * y / w2;
                }
            }
        }
        (h, hx, hy)
    }

    /// Ray parameter where `o + s·d` meets the surface.
    /// Newton starts from `guess` when given, else from the rest plane.
    fn intersect_surface(&self, o: &Point3, d: &Vec3, t: f64, guess: Option<f64>) -> Option<f64> {
        let mut s = guess.unwrap_or((self.cfg.z0 - o.z) / d.z);
        for _ in 0..30 {
            let (x, y) = (o.x + s * d.x, o.y + s * d.y);
            let (h, hx, hy) = self.height(x, y, t);
            let g = o.z + s * d.z - h;
            let dg = d.z - hx * d.x - hy * d.y;
            if !(dg.abs() > 1e-12) {
                return None;
            }
            let step = g / dg;
            s -= step;
            if step.abs() < 1e-13 {
                break;
            }
        }
        (s > 0.0 && s.is_finite()).then_some(s)
    }

    fn intersect_tool(&self, o: &Point3, d: &Vec3, frame: usize) -> Option<f64> {
        let c = self.cfg.occluder_center(frame)?;
        let h = self.cfg.occluder.as_ref()?.half_extents;
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            let (lo, hi) = (c[a] - h[a], c[a] + h[a]);
            if d[a].abs() < 1e-15 {
                if o[a] < lo || o[a] > hi {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }

    fn cast(&self, o: &Point3, d: &Vec3, frame: usize, t: f64, with_tool: bool) -> Option<Hit> {
        self.cast_from(o, d, frame, t, with_tool, None).0
    }

    /// Like `cast`, also returning the tissue intersection for warm starts.
    fn cast_from(
        &self,
        o: &Point3,
        d: &Vec3,
        frame: usize,
        t: f64,
        with_tool: bool,
        guess: Option<f64>,
    ) -> (Option<Hit>, Option<f64>) {
        let surf = self.intersect_surface(o, d, t, guess);
        let tool = if with_tool { self.intersect_tool(o, d, frame) } else { None };
        let hit = match (surf, tool) {
            (Some(s), Some(k)) if k <= s => Some(Hit::Tool(k)),
            (_, Some(k)) if surf.is_none() => Some(Hit::Tool(k)),
            (Some(s), _) => Some(Hit::Tissue(s)),
            _ => None,
        };
        (hit, surf)
    }

    /// World ray through pixel `(u, v)` of a camera; `d` has unit camera-z.
    fn ray(&self, pose: &RigidPose, u: f64, v: f64) -> (Point3, Vec3) {
        let k = &self.cfg.intrinsics;
        let dc = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        (pose.translation, pose.rotation * dc)
    }

    fn tissue_color(&self, p: &Point3) -> [f64; 3] {
        let s = self.cfg.texture_scale * 8.0;
        let n = self.tissue.fbm(p.x / s, p.y / s);
        let n2 = self.tissue.fbm(p.y / s + 91.0, p.x / s - 37.0);
        [130.0 + 110.0 * n, 40.0 + 70.0 * n + 20.0 * n2, 40.0 + 40.0 * n + 20.0 * n2]
    }

    fn tool_color(&self, p: &Point3, frame: usize) -> [f64; 3] {
        let c = self.cfg.occluder_center(frame).unwrap_or_default();
        let s = self.cfg.texture_scale * 6.0;
        let q = p - c;
        let n = self.tool.fbm(q.x / s + q.z / s, q.y / s);
        [20.0 + 40.0 * n, 110.0 + 90.0 * n, 170.0 + 80.0 * n]
    }

    fn smoke_alpha(&self, u: f64, v: f64, frame: usize) -> (f64, f64) {
        let op = self.cfg.smoke_opacity;
        if op == 0.0 {
            return (0.0, 0.0);
        }
        let drift = frame as f64 * 0.7;
        let n = self.smoke.fbm(u / 90.0 + drift / 90.0, v / 90.0);
        let g = self.smoke.fbm(v / 40.0 + 13.0, u / 40.0 - drift / 40.0);
        (op * n, 180.0 + 60.0 * g)
    }

    fn shade(&self, hit: Hit, o: &Point3, d: &Vec3, frame: usize, u: f64, v: f64) -> [u8; 3] {
        let p = o + d * hit.depth();
        let c = match hit {
            Hit::Tissue(_) => self.tissue_color(&p),
            Hit::Tool(_) => self.tool_color(&p, frame),
        };
        let (a, gray) = self.smoke_alpha(u, v, frame);
        c.map(|x| ((1.0 - a) * x + a * gray).round().clamp(0.0, 255.0) as u8)
    }

    /// Renders frame `i`.
    pub fn frame(&self, i: usize) -> GroundTruthFrame {
        let k = &self.cfg.intrinsics;
        let (w, h) = (k.width, k.height);
        let t = self.cfg.time(i);
        let pose = self.cfg.camera_pose(i);
        let right_pose = pose.compose(&RigidPose::from_translation(Vec3::new(k.baseline, 0.0, 0.0)));
        let disparity_scale = k.fx * k.baseline;

        type Row = (Vec<u8>, Vec<u8>, Vec<f64>, Vec<bool>, Vec<bool>);
        let rows: Vec<Row> = (0..h)
            .into_par_iter()
            .map(|v| {
                let mut lrow = vec![0u8; 3 * w];
                let mut rrow = vec![0u8; 3 * w];
                let mut depth = vec![f64::NAN; w];
                let mut tool = vec![false; w];
                let mut single = vec![false; w];
                let (mut lguess, mut rguess) = (None, None);
                for u in 0..w {
                    let (fu, fv) = (u as f64, v as f64);
                    let (o, d) = self.ray(&pose, fu, fv);
                    let (lhit, ls) = self.cast_from(&o, &d, i, t, true, lguess);
                    lguess = ls.or(lguess);
                    if let Some(hit) = lhit {
                        lrow[3 * u..3 * u + 3].copy_from_slice(&self.shade(hit, &o, &d, i, fu, fv));
                        depth[u] = hit.depth();
                        tool[u] = matches!(hit, Hit::Tool(_));
                        let ur = fu - disparity_scale / hit.depth();
                        single[u] = if ur < -0.5 {
                            true
                        } else {
                            let (ro, rd) = self.ray(&right_pose, ur, fv);
                            match self.cast_from(&ro, &rd, i, t, true, Some(hit.depth())).0 {
                                Some(rh) => {
                                    std::mem::discriminant(&rh) != std::mem::discriminant(&hit)
                                        || (rh.depth() - hit.depth()).abs() > 1e-6 * hit.depth()
                                }
                                None => true,
                            }
                        };
                    }
                    let (ro, rd) = self.ray(&right_pose, fu, fv);
                    let (rhit, rs) = self.cast_from(&ro, &rd, i, t, true, rguess);
                    rguess = rs.or(rguess);
                    if let Some(hit) = rhit {
                        rrow[3 * u..3 * u + 3].copy_from_slice(&self.shade(hit, &ro, &rd, i, fu, fv));
                    }
                }
                (lrow, rrow, depth, tool, single)
            })
            .collect();

        let mut left = Vec::with_capacity(3 * w * h);
        let mut right = Vec::with_capacity(3 * w * h);
        let mut depth = Vec::with_capacity(w * h);
        let mut tool = Vec::with_capacity(w * h);
        let mut single_view = Vec::with_capacity(w * h);
        for (l, r, d, m, s) in rows {
            left.extend(l);
            right.extend(r);
            depth.extend(d);
            tool.extend(m);
            single_view.extend(s);
        }
        let mut dm = DepthMap::invalid(w, h, i);
        for (j, &z) in depth.iter().enumerate() {
            if z.is_finite() && z > 0.0 {
                dm.set_valid(j, z);
            }
        }
        GroundTruthFrame {
            index: i,
            left: RgbImage::from_raw(w as u32, h as u32, left).expect("buffer size"),
            right: RgbImage::from_raw(w as u32, h as u32, right).expect("buffer size"),
            depth: dm,
            tool_mask: ToolMask {
                width: w,
                height: h,
                data: tool,
                timestamp: i,
            },
            single_view,
            pose,
            surface_points: self.surface_points(i),
        }
    }

    /// Tissue points (tool ignored) visible to both cameras at frame `i`.
    pub fn surface_points(&self, i: usize) -> Vec<Point3> {
        let k = &self.cfg.intrinsics;
        let t = self.cfg.time(i);
        let pose = self.cfg.camera_pose(i);
        let mut out = Vec::new();
        for v in (0..k.height).step_by(SURFACE_SAMPLE_STRIDE) {
            for u in (0..k.width).step_by(SURFACE_SAMPLE_STRIDE) {
                let (o, d) = self.ray(&pose, u as f64, v as f64);
                if let Some(Hit::Tissue(s)) = self.cast(&o, &d, i, t, false) {
                    if u as f64 - k.fx * k.baseline / s >= 0.0 {
                        out.push(o + d * s);
                    }
                }
            }
        }
        out
    }

    /// Tissue depth seen from the left camera with the tool removed.
    pub fn tissue_depth(&self, i: usize) -> DepthMap {
        let k = &self.cfg.intrinsics;
        let t = self.cfg.time(i);
        let pose = self.cfg.camera_pose(i);
        let mut dm = DepthMap::invalid(k.width, k.height, i);
        for v in 0..k.height {
            for u in 0..k.width {
                let (o, d) = self.ray(&pose, u as f64, v as f64);
                if let Some(Hit::Tissue(s)) = self.cast(&o, &d, i, t, false) {
                    dm.set_valid(v * k.width + u, s);
                }
            }
        }
        dm
    }

    /// World position at time of frame `i` of the surface point above `(x, y)`.
    pub fn surface_at(&self, x: f64, y: f64, i: usize) -> Point3 {
        Point3::new(x, y, self.height(x, y, self.cfg.time(i)).0)
    }
}

/// Renders every frame of a scene, in order.
pub fn generate(cfg: &SceneConfig) -> Result<Vec<GroundTruthFrame>> {
    let sim = Simulator::new(cfg.clone())?;
    Ok((0..sim.len()).map(|i| sim.frame(i)).collect())
}

/// Closest-point distance from `p` to the surface at frame `i`, by a local
/// search over the height field (accurate for gentle slopes).
pub fn distance_to_surface(sim: &Simulator, p: &Point3, i: usize) -> f64 {
    let t = sim.cfg.time(i);
    let (mut x, mut y) = (p.x, p.y);
    // Gauss-Newton on the squared distance to (x, y, h(x, y)).
    for _ in 0..10 {
        let (h, hx, hy) = sim.height(x, y, t);
        let r = Vec3::new(x - p.x, y - p.y, h - p.z);
        let jx = Vec3::new(1.0, 0.0, hx);
        let jy = Vec3::new(0.0, 1.0, hy);
        let a = Matrix3::new(jx.dot(&jx), jx.dot(&jy), 0.0, jx.dot(&jy), jy.dot(&jy), 0.0, 0.0, 0.0, 1.0);
        let b = Vec3::new(-jx.dot(&r), -jy.dot(&r), 0.0);
        let Some(step) = a.lu().solve(&b) else { break };
        x += step.x;
        y += step.y;
        if step.x.abs() + step.y.abs() < 1e-12 {
            break;
        }
    }
    (sim.surface_at(x, y, i) - p).norm()
}
