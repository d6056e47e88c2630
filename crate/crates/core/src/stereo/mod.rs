//! Dense stereo depth from epipolar attention matching.

mod attention;
mod block_match;
mod cost;
mod features;
mod matcher;

pub use attention::{attention_update, AttentionConfig, AttentionOutput, DEFAULT_MATCH_GAIN};
pub use block_match::block_match_oracle;
pub use cost::{cost_model, lightweight_config, CostEstimate};
pub use features::{extract_features, FeatureMap, FEATURE_CHANNELS, INTENSITY_WEIGHT};
pub use matcher::{LeftMatch, RowLikelihood, RowMatcher};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{disparity_to_depth, CameraIntrinsics};
use crate::imaging::{dims, GrayImage};

/// Per-pixel state of a depth or disparity estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DepthStatus {
    Valid,
    /// No usable value: zero/negative disparity, out of range, or masked out.
    Invalid,
    /// Failed the left-right consistency check.
    Occluded,
    /// Likelihood too flat to trust.
    LowConfidence,
}

/// Metric depth of the left view. Non-valid pixels store `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub status: Vec<DepthStatus>,
    pub timestamp: usize,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize, timestamp: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            status: vec![DepthStatus::Invalid; width * height],
            timestamp,
        }
    }

    /// Builds a map from raw depths; non-positive or non-finite values are invalid.
    pub fn from_depths(width: usize, height: usize, depths: &[f64], timestamp: usize) -> Result<Self> {
        if depths.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "{} depth values for a {width}x{height} map",
                depths.len()
            )));
        }
        let mut map = Self::invalid(width, height, timestamp);
        for (i, &z) in depths.iter().enumerate() {
            if z.is_finite() && z > 0.0 {
                map.set_valid(i, z);
            }
        }
        Ok(map)
    }

    #[inline]
    pub fn set_valid(&mut self, i: usize, depth: f64) {
        self.depth[i] = depth;
        self.status[i] = DepthStatus::Valid;
    }

    #[inline]
    pub fn invalidate(&mut self, i: usize, status: DepthStatus) {
        self.depth[i] = 0.0;
        self.status[i] = status;
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.status[i] == DepthStatus::Valid
    }

    /// Depth at `(u, v)` if valid.
    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.is_valid(i).then(|| self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.status.iter().filter(|s| **s == DepthStatus::Valid).count()
    }

    pub fn count(&self, status: DepthStatus) -> usize {
        self.status.iter().filter(|s| **s == status).count()
    }
}

/// Sub-pixel disparity of the left view. Non-valid pixels store `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub disparity: Vec<f32>,
    pub status: Vec<DepthStatus>,
}

impl DisparityMap {
    pub fn get(&self, u: usize, v: usize) -> Option<f32> {
        let i = v * self.width + u;
        (self.status[i] == DepthStatus::Valid).then(|| self.disparity[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoConfig {
    pub attention: AttentionConfig,
    /// Largest disparity searched; `None` uses a quarter of the image width.
    pub max_disp: Option<usize>,
    /// Valid depths lie strictly inside `(z_min, z_max)` (meters).
    pub z_min: f64,
    pub z_max: f64,
    /// Left-right check tolerance in pixels.
    pub lr_tolerance: f64,
    /// Pixels whose likelihood entropy exceeds `entropy_ratio · ln(candidates)`
    /// are low-confidence.
    pub entropy_ratio: f64,
    /// Only rows `v % row_step == 0` are matched; the others stay invalid.
    pub row_step: usize,
}

impl StereoConfig {
    pub fn new(attention: AttentionConfig) -> Self {
        Self {
            attention,
            max_disp: None,
            z_min: 0.01,
            z_max: 2.0,
            lr_tolerance: 1.0,
            entropy_ratio: 0.8,
            row_step: 1,
        }
    }

    pub fn resolved_max_disp(&self, width: usize) -> usize {
        self.max_disp
            .unwrap_or(width / 4)
            .min(width.saturating_sub(1))
            .max(1)
    }
}

/// Matches one row pair of descriptors (see [`RowMatcher`]).
pub fn match_row(left: &[f32], right: &[f32], cfg: &AttentionConfig, max_disp: usize) -> RowLikelihood {
    RowMatcher::new(cfg, FEATURE_CHANNELS, max_disp).match_row(left, right)
}

/// Left-view disparity with left-right consistency and entropy gating.
pub fn estimate_disparity(left: &GrayImage, right: &GrayImage, cfg: &StereoConfig) -> Result<DisparityMap> {
    let (w, h) = dims(left);
    if dims(right) != (w, h) {
        return Err(Error::InvalidInput(format!(
            "stereo pair size mismatch: {w}x{h} vs {}x{}",
            right.width(),
            right.height()
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::InvalidInput("empty stereo pair".into()));
    }
    let max_disp = cfg.resolved_max_disp(w);
    let matcher = RowMatcher::new(&cfg.attention, FEATURE_CHANNELS, max_disp);
    let (fl, fr) = rayon::join(|| extract_features(left), || extract_features(right));

    let rows: Vec<(Vec<f32>, Vec<DepthStatus>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            if v % cfg.row_step.max(1) != 0 {
                return (vec![f32::NAN; w], vec![DepthStatus::Invalid; w]);
            }
            let lik = matcher.match_row(fl.row(v), fr.row(v));
            let right_best: Vec<usize> = (0..w).map(|ur| lik.best_right(ur)).collect();
            let mut disp = vec![f32::NAN; w];
            let mut status = vec![DepthStatus::Invalid; w];
            for u in 0..w {
                let m = lik.best_left(u);
                let ur = u - m.disparity;
                let back = right_best[ur] as f64;
                // A flat likelihood makes the left-right check meaningless, so it goes first.
                status[u] = if m.candidates > 1 && m.entropy > cfg.entropy_ratio * (m.candidates as f64).ln() {
                    DepthStatus::LowConfidence
                } else if (m.disparity as f64 - back).abs() > cfg.lr_tolerance {
                    DepthStatus::Occluded
                } else if m.refined <= 0.0 {
                    DepthStatus::Invalid
                } else {
                    disp[u] = m.refined as f32;
                    DepthStatus::Valid
                };
            }
            (disp, status)
        })
        .collect();

    let mut disparity = Vec::with_capacity(w * h);
    let mut status = Vec::with_capacity(w * h);
    for (d, s) in rows {
        disparity.extend(d);
        status.extend(s);
    }
    Ok(DisparityMap {
        width: w,
        height: h,
        disparity,
        status,
    })
}

/// Converts a disparity map to depth, enforcing the configured depth range.
pub fn disparity_map_to_depth(
    disp: &DisparityMap,
    k: &CameraIntrinsics,
    cfg: &StereoConfig,
    timestamp: usize,
) -> DepthMap {
    let mut out = DepthMap::invalid(disp.width, disp.height, timestamp);
    for i in 0..disp.disparity.len() {
        out.status[i] = disp.status[i];
        if disp.status[i] != DepthStatus::Valid {
            continue;
        }
        match disparity_to_depth(disp.disparity[i] as f64, k) {
            Some(z) if z > cfg.z_min && z < cfg.z_max => out.set_valid(i, z),
            _ => out.invalidate(i, DepthStatus::Invalid),
        }
    }
    out
}

/// Depth of the left view of a rectified pair.
pub fn estimate_depth(
    left: &GrayImage,
    right: &GrayImage,
    k: &CameraIntrinsics,
    cfg: &StereoConfig,
    timestamp: usize,
) -> Result<DepthMap> {
    let (w, h) = dims(left);
    if (w, h) != (k.width, k.height) || dims(right) != (k.width, k.height) {
        return Err(Error::InvalidInput(format!(
            "images {w}x{h} / {}x{} do not match calibration {}x{}",
            right.width(),
            right.height(),
            k.width,
            k.height
        )));
    }
    let disp = estimate_disparity(left, right, cfg)?;
    Ok(disparity_map_to_depth(&disp, k, cfg, timestamp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, w as f64 / 2.0, h as f64 / 2.0, 0.01, w, h).unwrap()
    }

    fn cfg() -> StereoConfig {
        let mut c = StereoConfig::new(AttentionConfig::seeded(12, 2, 0).unwrap());
        c.max_disp = Some(12);
        c
    }

    /// Random values on a 3 px lattice, bilinearly interpolated.
    fn smooth_texture(w: u32, h: u32, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gw, gh) = (w as usize / 3 + 2, h as usize / 3 + 2);
        let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(0.0..255.0)).collect();
        GrayImage::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f64 / 3.0, y as f64 / 3.0);
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let g = |a: usize, b: usize| grid[b * gw + a];
            let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
            let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
            Luma([(top * (1.0 - ty) + bot * ty).round() as u8])
        })
    }

    #[test]
    fn identical_images_give_no_valid_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = GrayImage::from_fn(48, 20, |_, _| Luma([rng.random_range(0..=255)]));
        let d = estimate_depth(&img, &img, &k(48, 20), &cfg(), 0).unwrap();
        assert_eq!(d.valid_count(), 0);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let a = GrayImage::new(10, 10);
        let b = GrayImage::new(12, 10);
        assert!(matches!(estimate_depth(&a, &b, &k(10, 10), &cfg(), 0), Err(Error::InvalidInput(_))));
        assert!(matches!(estimate_depth(&a, &a, &k(12, 10), &cfg(), 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn textureless_pair_is_low_confidence() {
        let img = GrayImage::from_pixel(40, 12, Luma([100]));
        let d = estimate_disparity(&img, &img, &cfg()).unwrap();
        let low = d.status.iter().filter(|s| **s == DepthStatus::LowConfidence).count();
        // Column 0 has a single candidate and is never low-confidence.
        assert_eq!(low, 39 * 12);
    }

    #[test]
    fn constant_shift_gives_uniform_depth() {
        let left = smooth_texture(64, 24, 2);
        let right = GrayImage::from_fn(64, 24, |x, y| *left.get_pixel((x + 4).min(63), y));
        let kk = k(64, 24);
        let d = estimate_depth(&left, &right, &kk, &cfg(), 3).unwrap();
        assert_eq!(d.timestamp, 3);
        let disp = estimate_disparity(&left, &right, &cfg()).unwrap();
        let mut good = 0;
        for v in 4..20 {
            for u in 16..56 {
                if let (Some(z), Some(dd)) = (d.get(u, v), disp.get(u, v)) {
                    assert!((z - kk.fx * kk.baseline / dd as f64).abs() < 1e-9);
                    if (dd - 4.0).abs() <= 1.0 {
                        good += 1;
                    }
                }
            }
        }
        assert!(good as f64 >= 0.95 * (16.0 * 40.0), "good = {good}");
    }

    #[test]
    fn row_step_skips_rows() {
        let left = smooth_texture(64, 24, 5);
        let right = GrayImage::from_fn(64, 24, |x, y| *left.get_pixel((x + 4).min(63), y));
        let mut c = cfg();
        let full = estimate_disparity(&left, &right, &c).unwrap();
        c.row_step = 2;
        let half = estimate_disparity(&left, &right, &c).unwrap();
        for v in 0..24 {
            for u in 0..64 {
                let i = v * 64 + u;
                if v % 2 == 0 {
                    assert_eq!(half.status[i], full.status[i]);
                } else {
                    assert_eq!(half.status[i], DepthStatus::Invalid);
                }
            }
        }
    }

    #[test]
    fn depth_range_is_enforced() {
        let disp = DisparityMap {
            width: 3,
            height: 1,
            disparity: vec![1.0, 10.0, 1000.0],
            status: vec![DepthStatus::Valid; 3],
        };
        let kk = k(3, 1);
        let mut c = cfg();
        c.z_min = 0.01;
        c.z_max = 0.5;
        // depths: 1.0, 0.1, 0.001
        let d = disparity_map_to_depth(&disp, &kk, &c, 0);
        assert_eq!(d.status, vec![DepthStatus::Invalid, DepthStatus::Valid, DepthStatus::Invalid]);
        assert!((d.depth[1] - 0.1).abs() < 1e-6);
    }
}
