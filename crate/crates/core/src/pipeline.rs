//! Per-frame reconstruction loop, configuration, outputs and benchmarking.
//!
//! Each frame runs depth and tool masking concurrently, then observation
//! building, camera registration, the non-rigid solve, fusion and optional
//! evaluation, in that order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deformation::{solve_deformation, DataTerm, DeformationParams, NodeGraph, Skin, SUPPORT_REACH};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, frame_metrics, render_surfels, FrameMetrics, MetricsReport};
use crate::fusion::{admit_new, fuse_pair, is_stale, prune_stale, FusionConfig, FusionStats};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::imaging::to_luma;
use crate::io::{self, FrameBundle};
use crate::registration::{find_correspondences, register, CorrespondenceSet, RegistrationParams};
use crate::segmentation::{apply_mask, default_radii, morph_refine, ChromaKey, MaskFiles, MaskProvider, NoMask, ToolMask};
use crate::sim::{GroundTruthFrame, Simulator};
use crate::stereo::{estimate_depth, lightweight_config, AttentionConfig, DepthMap, StereoConfig};
use crate::surfel::{build_observation, ObservationParams, Surfel, SurfelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Lightweight attention, every second pixel and row.
    Efficient,
    /// Base attention, every pixel.
    HighQuality,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "efficient" => Ok(Profile::Efficient),
            "high-quality" => Ok(Profile::HighQuality),
            _ => Err(Error::Config(format!("unknown profile '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    None,
    File,
    Chroma,
}

impl std::str::FromStr for MaskSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskSource::None),
            "file" => Ok(MaskSource::File),
            "chroma" => Ok(MaskSource::Chroma),
            _ => Err(Error::Config(format!("unknown mask provider '{s}'"))),
        }
    }
}

/// Base attention layout; the efficient profile derives its layout from it.
pub const BASE_ATTENTION: (usize, usize) = (12, 4);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StereoSettings {
    /// Overrides the profile's attention width.
    pub c_attn: Option<usize>,
    /// Overrides the profile's number of attention applications.
    pub n_attn: Option<usize>,
    pub max_disp: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub lr_tolerance: f64,
    pub entropy_ratio: f64,
    /// Overrides the profile's row step.
    pub row_step: Option<usize>,
}

impl Default for StereoSettings {
    fn default() -> Self {
        Self {
            c_attn: None,
            n_attn: None,
            max_disp: 64,
            z_min: 0.01,
            z_max: 2.0,
            lr_tolerance: 1.0,
            entropy_ratio: 0.8,
            row_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSettings {
    pub provider: MaskSource,
    /// Chroma rule margin (`b − r > margin`).
    pub margin: i16,
    pub close_radius: Option<usize>,
    pub dilate_radius: Option<usize>,
    /// Mask directory for the file provider; defaults to the input directory.
    pub dir: Option<PathBuf>,
}

impl Default for MaskSettings {
    fn default() -> Self {
        Self {
            provider: MaskSource::Chroma,
            margin: ChromaKey::default().margin,
            close_radius: None,
            dilate_radius: None,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationSettings {
    /// Overrides the profile's pixel stride.
    pub stride: Option<usize>,
    pub normal_step: usize,
    pub max_jump: f64,
}

impl Default for ObservationSettings {
    fn default() -> Self {
        Self {
            stride: None,
            normal_step: 4,
            max_jump: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    /// Seeds the attention weights.
    pub seed: u64,
    pub stereo: StereoSettings,
    pub mask: MaskSettings,
    pub observation: ObservationSettings,
    pub registration: RegistrationParams,
    pub deformation: DeformationParams,
    pub fusion: FusionConfig,
    /// Score each frame against its reprojection.
    pub eval: bool,
    /// Tool mask used for scoring, independent of the reconstruction mask.
    pub eval_mask: MaskSource,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Directory of `depth_%06d.pfm` replacing stereo depth.
    pub depth_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Efficient,
            seed: 0,
            stereo: StereoSettings::default(),
            mask: MaskSettings::default(),
            observation: ObservationSettings::default(),
            registration: RegistrationParams::default(),
            deformation: DeformationParams::default(),
            fusion: FusionConfig::default(),
            eval: false,
            eval_mask: MaskSource::Chroma,
            input: None,
            output: None,
            depth_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn with_profile(profile: Profile) -> Self {
        Self {
            profile,
            ..Self::default()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        let base = AttentionConfig::seeded(BASE_ATTENTION.0, BASE_ATTENTION.1, self.seed)?;
        let profiled = match self.profile {
            Profile::HighQuality => base,
            Profile::Efficient => lightweight_config(&base)?,
        };
        match (self.stereo.c_attn, self.stereo.n_attn) {
            (None, None) => Ok(profiled),
            (c, n) => AttentionConfig::seeded_with_gain(
                c.unwrap_or(profiled.c_attn),
                n.unwrap_or(profiled.n_attn),
                self.seed,
                profiled.gain,
            ),
        }
    }

    pub fn stride(&self) -> usize {
        self.observation.stride.unwrap_or(match self.profile {
            Profile::Efficient => 2,
            Profile::HighQuality => 1,
        })
    }

    pub fn stereo_config(&self) -> Result<StereoConfig> {
        let s = &self.stereo;
        let mut c = StereoConfig::new(self.attention()?);
        c.max_disp = Some(s.max_disp);
        c.z_min = s.z_min;
        c.z_max = s.z_max;
        c.lr_tolerance = s.lr_tolerance;
        c.entropy_ratio = s.entropy_ratio;
        c.row_step = s.row_step.unwrap_or(self.stride()).max(1);
        Ok(c)
    }

    pub fn observation_params(&self) -> ObservationParams {
        ObservationParams {
            stride: self.stride(),
            normal_step: self.observation.normal_step,
            max_jump: self.observation.max_jump,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        let s = &self.stereo;
        if !(s.z_min > 0.0 && s.z_max > s.z_min) || s.max_disp == 0 {
            return Err(Error::Config("stereo depth range or disparity range invalid".into()));
        }
        if self.stride() == 0 || self.observation.normal_step == 0 {
            return Err(Error::Config("stride and normal step must be >= 1".into()));
        }
        if !(self.deformation.spacing > 0.0) || self.deformation.lambda_reg < 0.0 {
            return Err(Error::Config("deformation spacing must be positive".into()));
        }
        for (name, p) in [("input", &self.input), ("depth_dir", &self.depth_dir), ("mask dir", &self.mask.dir)] {
            if let Some(p) = p {
                if !p.is_dir() {
                    return Err(Error::Config(format!("{name} '{}' is not a directory", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Wall-clock seconds per stage for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FrameTiming {
    pub frame: usize,
    pub depth: f64,
    pub mask: f64,
    pub registration: f64,
    pub deformation: f64,
    pub fusion: f64,
    pub evaluation: f64,
}

pub const STAGES: [&str; 5] = ["depth", "mask", "registration", "deformation", "fusion"];

impl FrameTiming {
    pub fn stage(&self, name: &str) -> f64 {
        match name {
            "depth" => self.depth,
            "mask" => self.mask,
            "registration" => self.registration,
            "deformation" => self.deformation,
            "fusion" => self.fusion,
            "evaluation" => self.evaluation,
            _ => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageStats {
    pub median: f64,
    pub p95: f64,
    pub count: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and 95th percentile of each stage.
pub fn stage_summary(timings: &[FrameTiming]) -> BTreeMap<String, StageStats> {
    STAGES
        .iter()
        .map(|&s| {
            let mut v: Vec<f64> = timings.iter().map(|t| t.stage(s)).collect();
            v.sort_by(f64::total_cmp);
            (
                s.to_string(),
                StageStats {
                    median: percentile(&v, 0.5),
                    p95: percentile(&v, 0.95),
                    count: v.len(),
                },
            )
        })
        .collect()
}

/// What happened to one frame.
#[derive(Debug, Clone)]
pub struct FrameOutcome {
    pub index: usize,
    /// Depth as estimated (or supplied), before tool masking.
    pub depth: DepthMap,
    /// Refined tool mask used by the reconstruction.
    pub mask: ToolMask,
    /// Source pixels of observations fused into existing surfels.
    pub fused_pixels: Vec<u32>,
    /// Source pixels of observations admitted as new surfels.
    pub admitted_pixels: Vec<u32>,
    pub pose: RigidPose,
    /// Registration failed; the previous pose was kept.
    pub flagged: bool,
    pub stats: FusionStats,
    pub timing: FrameTiming,
    pub metrics: Option<FrameMetrics>,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub map: SurfelMap,
    pub graph: NodeGraph,
    pub trajectory: Vec<RigidPose>,
    pub flagged_frames: Vec<usize>,
    pub fusion: Vec<FusionStats>,
    pub timings: Vec<FrameTiming>,
    pub metrics: Option<MetricsReport>,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsFile<'a> {
    #[serde(flatten)]
    pub report: Option<&'a MetricsReport>,
    pub frames: usize,
    pub flagged_frames: &'a [usize],
    pub fusion: &'a [FusionStats],
    pub map_size: usize,
}

impl PipelineOutput {
    /// Surfels carried into the deformed frame of the last processed frame.
    pub fn live_surfels(&self) -> Vec<Surfel> {
        crate::evaluation::warp_surfels(&self.map, &self.graph)
    }

    /// Writes model.ply, nodes.ply, trajectory.csv, metrics.json and timings.json.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_surfel_ply(&dir.join("model.ply"), &self.map.surfels)?;
        io::write_node_ply(&dir.join("nodes.ply"), &self.graph)?;
        io::write_trajectory_csv(&dir.join("trajectory.csv"), &self.trajectory, &self.flagged_frames)?;
        io::write_json(
            &dir.join("metrics.json"),
            &MetricsFile {
                report: self.metrics.as_ref(),
                frames: self.trajectory.len(),
                flagged_frames: &self.flagged_frames,
                fusion: &self.fusion,
                map_size: self.map.len(),
            },
        )?;
        #[derive(Serialize)]
        struct Timings<'a> {
            per_frame: &'a [FrameTiming],
            summary: BTreeMap<String, StageStats>,
        }
        io::write_json(
            &dir.join("timings.json"),
            &Timings {
                per_frame: &self.timings,
                summary: stage_summary(&self.timings),
            },
        )
    }
}

fn provider(source: MaskSource, settings: &MaskSettings, input: Option<&Path>) -> Result<Box<dyn MaskProvider>> {
    Ok(match source {
        MaskSource::None => Box::new(NoMask),
        MaskSource::Chroma => Box::new(ChromaKey { margin: settings.margin }),
        MaskSource::File => {
            let dir = settings
                .dir
                .clone()
                .or_else(|| input.map(Path::to_path_buf))
                .ok_or_else(|| Error::Config("file mask provider needs a mask directory".into()))?;
            Box::new(MaskFiles::new(dir))
        }
    })
}

/// Online reconstruction state; feed frames in order with [`Reconstructor::process`].
pub struct Reconstructor {
    cfg: PipelineConfig,
    k: CameraIntrinsics,
    stereo: StereoConfig,
    obs_params: ObservationParams,
    radii: (usize, usize),
    mask: Box<dyn MaskProvider>,
    eval_mask: Box<dyn MaskProvider>,
    map: SurfelMap,
    /// Cached canonical support of each surfel. Refreshed when nodes are
    /// inserted nearby; fused surfels keep theirs.
    skins: Vec<Option<Skin>>,
    graph: NodeGraph,
    pose: RigidPose,
    trajectory: Vec<RigidPose>,
    flagged: Vec<usize>,
    fusion: Vec<FusionStats>,
    timings: Vec<FrameTiming>,
    metrics: Vec<FrameMetrics>,
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

impl Reconstructor {
    pub fn new(cfg: PipelineConfig, k: CameraIntrinsics) -> Result<Self> {
        cfg.validate()?;
        k.validate()?;
        let stereo = cfg.stereo_config()?;
        let input = cfg.input.clone();
        let d = default_radii(k.width);
        let radii = (cfg.mask.close_radius.unwrap_or(d.0), cfg.mask.dilate_radius.unwrap_or(d.1));
        Ok(Self {
            mask: provider(cfg.mask.provider, &cfg.mask, input.as_deref())?,
            eval_mask: provider(cfg.eval_mask, &cfg.mask, input.as_deref())?,
            obs_params: cfg.observation_params(),
            graph: NodeGraph::from_params(&cfg.deformation),
            stereo,
            radii,
            k,
            map: SurfelMap::new(0),
            skins: Vec::new(),
            pose: RigidPose::identity(),
            trajectory: Vec::new(),
            flagged: Vec::new(),
            fusion: Vec::new(),
            timings: Vec::new(),
            metrics: Vec::new(),
            cfg,
        })
    }

    pub fn map(&self) -> &SurfelMap {
        &self.map
    }

    pub fn graph(&self) -> &NodeGraph {
        &self.graph
    }

    pub fn pose(&self) -> &RigidPose {
        &self.pose
    }

    /// Model surfels in the deformed frame of the latest frame.
    pub fn live_surfels(&self) -> Vec<Surfel> {
        use rayon::prelude::*;
        self.map
            .surfels
            .par_iter()
            .zip(&self.skins)
            .map(|(s, sk)| match sk {
                Some(sk) => Surfel {
                    position: self.graph.warp_point_with(&s.position, sk),
                    normal: self.graph.warp_normal_with(&s.normal, sk),
                    ..s.clone()
                },
                None => s.clone(),
            })
            .collect()
    }

    /// Recomputes cached skins of surfels within reach of `new_nodes`.
    fn refresh_skins(&mut self, new_nodes: &[crate::geometry::Point3]) {
        use rayon::prelude::*;
        if new_nodes.is_empty() {
            return;
        }
        let reach = SUPPORT_REACH * self.graph.spacing;
        let near = crate::spatial::SpatialGrid::from_points(reach, new_nodes.iter().copied());
        let graph = &self.graph;
        self.skins
            .par_iter_mut()
            .zip(&self.map.surfels)
            .for_each(|(sk, s)| {
                if near.any_within(&s.position, reach) {
                    *sk = graph.skin(&s.position);
                }
            });
    }

    fn depth_and_mask(&self, f: &FrameBundle) -> Result<(DepthMap, ToolMask, f64, f64)> {
        let depth_job = || -> Result<(DepthMap, f64)> {
            let t = Instant::now();
            let d = match &f.depth {
                Some(d) => d.clone(),
                None => estimate_depth(&to_luma(&f.left), &to_luma(&f.right), &self.k, &self.stereo, f.index)?,
            };
            Ok((d, secs(t)))
        };
        let mask_job = || -> Result<(ToolMask, f64)> {
            let t = Instant::now();
            let m = self.mask.segment(&f.left, f.index)?;
            let m = morph_refine(&m, self.radii.0, self.radii.1);
            Ok((m, secs(t)))
        };
        let (d, m) = rayon::join(depth_job, mask_job);
        let ((d, td), (m, tm)) = (d?, m?);
        Ok((d, m, td, tm))
    }

    /// Runs the full per-frame loop on the next frame.
    pub fn process(&mut self, f: &FrameBundle) -> Result<FrameOutcome> {
        let t_now = f.index;
        let mut timing = FrameTiming {
            frame: t_now,
            ..Default::default()
        };
        let (depth, mask, td, tm) = self.depth_and_mask(f)?;
        timing.depth = td;
        timing.mask = tm;

        let t = Instant::now();
        let masked = apply_mask(&depth, &mask)?;
        let obs = build_observation(&masked, &f.left, &self.k, &RigidPose::identity(), t_now, &self.obs_params);
        let mut flagged = false;
        let first = self.map.is_empty();
        let live = self.live_surfels();
        let corr: CorrespondenceSet = if first {
            CorrespondenceSet {
                pairs: Vec::new(),
                covered: vec![false; obs.len()],
            }
        } else {
            match register(&live, &obs, &self.pose, &self.k, &self.cfg.registration) {
                Ok(r) => {
                    self.pose = r.pose;
                    r.correspondences
                }
                Err(Error::DegenerateRegistration(_)) => {
                    flagged = true;
                    let r = &self.cfg.registration;
                    find_correspondences(&live, &obs, &self.pose, &self.k, r.max_depth_diff, r.max_normal_angle)
                }
                Err(e) => return Err(e),
            }
        };
        timing.registration = secs(t);

        let t = Instant::now();
        if !corr.pairs.is_empty() && !self.graph.is_empty() {
            let terms: Vec<DataTerm> = corr
                .pairs
                .iter()
                .filter_map(|c| {
                    Some(DataTerm {
                        point: self.map.surfels[c.ref_index].position,
                        skin: self.skins[c.ref_index]?,
                        target: self.pose.apply(&c.obs_position),
                        direction: self.pose.rotate(&c.obs_normal),
                    })
                })
                .collect();
            solve_deformation(&mut self.graph, &terms, &self.cfg.deformation);
        }
        timing.deformation = secs(t);

        let t = Instant::now();
        let mut fused_pixels = Vec::new();
        for c in &corr.pairs {
            let Some(skin) = self.skins[c.ref_index] else { continue };
            let o = obs.map.surfels[c.obs_index].transformed(&self.pose);
            let canon = Surfel {
                position: self.graph.inverse_warp_with(&o.position, &skin),
                normal: self.graph.inverse_warp_normal_with(&o.normal, &skin),
                ..o
            };
            if let Some(s) = fuse_pair(&self.map.surfels[c.ref_index], &canon, t_now) {
                self.map.surfels[c.ref_index] = s;
                fused_pixels.push(obs.pixels[c.obs_index]);
            }
        }
        let live_nodes = self.graph.live_grid();
        let (cand_idx, candidates): (Vec<usize>, Vec<Surfel>) = (0..obs.len())
            .filter(|&j| !corr.covered[j])
            .map(|j| {
                let o = obs.map.surfels[j].transformed(&self.pose);
                let canon = match self.graph.skin_live(&o.position, &live_nodes) {
                    Some(sk) => Surfel {
                        position: self.graph.inverse_warp_with(&o.position, &sk),
                        normal: self.graph.inverse_warp_normal_with(&o.normal, &sk),
                        ..o
                    },
                    None => o,
                };
                (j, canon)
            })
            .unzip();
        let before = self.map.len();
        let admitted = admit_new(&mut self.map, &candidates, &self.graph, &self.cfg.fusion, t_now);
        let admitted_pixels: Vec<u32> = admitted.iter().map(|&i| obs.pixels[cand_idx[i]]).collect();
        if first {
            let pts: Vec<_> = self.map.surfels.iter().map(|s| s.position).collect();
            let mut g = NodeGraph::build(&pts, self.cfg.deformation.spacing, self.cfg.deformation.k_neighbors);
            g.neighbor_reach = self.cfg.deformation.neighbor_reach;
            g.rebuild_neighbors();
            self.graph = g;
            self.skins = pts.iter().map(|p| self.graph.skin(p)).collect();
        } else {
            let pts: Vec<_> = self.map.surfels[before..].iter().map(|s| s.position).collect();
            let nodes_before = self.graph.len();
            self.graph.insert_nodes(&pts);
            let new_nodes: Vec<_> = self.graph.nodes[nodes_before..].iter().map(|n| n.position).collect();
            self.refresh_skins(&new_nodes);
            self.skins.extend(pts.iter().map(|p| self.graph.skin(p)));
        }
        let keep: Vec<bool> = self.map.surfels.iter().map(|s| !is_stale(s, t_now, &self.cfg.fusion)).collect();
        let pruned = prune_stale(&mut self.map, t_now, &self.cfg.fusion);
        if pruned > 0 {
            let mut it = keep.iter();
            self.skins.retain(|_| *it.next().expect("aligned"));
        }
        self.map.current_frame = t_now;
        timing.fusion = secs(t);

        let stats = FusionStats {
            frame: t_now,
            fused: fused_pixels.len(),
            admitted: admitted_pixels.len(),
            pruned,
            map_size: self.map.len(),
        };

        let mut metrics = None;
        if self.cfg.eval {
            let t = Instant::now();
            let rendered = render_surfels(&self.live_surfels(), &self.pose, &self.k);
            let tool = morph_refine(&self.eval_mask.segment(&f.left, t_now)?, self.radii.0, self.radii.1);
            let m = frame_metrics(t_now, &to_luma(&f.left), &to_luma(&rendered.image), &tool.data, &rendered.coverage)?;
            self.metrics.push(m.clone());
            metrics = Some(m);
            timing.evaluation = secs(t);
        }

        if flagged {
            self.flagged.push(t_now);
        }
        self.trajectory.push(self.pose);
        self.fusion.push(stats);
        self.timings.push(timing);
        Ok(FrameOutcome {
            index: t_now,
            depth,
            mask,
            fused_pixels,
            admitted_pixels,
            pose: self.pose,
            flagged,
            stats,
            timing,
            metrics,
        })
    }

    pub fn finish(self) -> Result<PipelineOutput> {
        let metrics = if self.cfg.eval { Some(aggregate(self.metrics)?) } else { None };
        Ok(PipelineOutput {
            map: self.map,
            graph: self.graph,
            trajectory: self.trajectory,
            flagged_frames: self.flagged,
            fusion: self.fusion,
            timings: self.timings,
            metrics,
        })
    }
}

/// Runs the configured input directory end to end and writes outputs when an
/// output directory is set. An input without frames is an `EmptyInput` error.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let input = cfg.input.as_deref().ok_or_else(|| Error::Config("no input directory".into()))?;
    let seq = io::ingest(input, cfg.depth_dir.as_deref())?;
    let Some(k) = seq.intrinsics else {
        return Err(Error::EmptyInput(input.to_path_buf()));
    };
    let mut rec = Reconstructor::new(cfg.clone(), k)?;
    for &i in &seq.indices {
        rec.process(&seq.load(i)?)?;
    }
    let out = rec.finish()?;
    if let Some(dir) = &cfg.output {
        out.write(dir)?;
    }
    Ok(out)
}

impl FrameBundle {
    /// Input bundle for a simulated frame, optionally with its true depth.
    pub fn from_ground_truth(f: &GroundTruthFrame, with_depth: bool) -> Self {
        FrameBundle {
            index: f.index,
            left: f.left.clone(),
            right: f.right.clone(),
            depth: with_depth.then(|| f.depth.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub preset: String,
    pub profile: Profile,
    pub frames: usize,
    pub warmup: usize,
    pub stages: BTreeMap<String, StageStats>,
}

pub const BENCH_WARMUP: usize = 5;
pub const BENCH_FRAMES: usize = 50;

/// Per-stage latency over `frames` simulated frames after `warmup` frames.
pub fn bench(cfg: &PipelineConfig, sim: &Simulator, preset: &str, frames: usize, warmup: usize) -> Result<BenchReport> {
    let k = sim.config().intrinsics;
    let mut rec = Reconstructor::new(cfg.clone(), k)?;
    let total = frames + warmup;
    let mut timings = Vec::with_capacity(frames);
    for i in 0..total {
        let f = sim.frame(i % sim.len().max(1));
        let mut bundle = FrameBundle::from_ground_truth(&f, false);
        bundle.index = i;
        let out = rec.process(&bundle)?;
        if i >= warmup {
            timings.push(out.timing);
        }
    }
    Ok(BenchReport {
        preset: preset.to_string(),
        profile: cfg.profile,
        frames,
        warmup,
        stages: stage_summary(&timings),
    })
}
