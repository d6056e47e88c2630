//! Tool masks: pluggable providers, morphological refinement and depth masking.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Luma, RgbImage};
use crate::stereo::{DepthMap, DepthStatus};

/// Per-pixel tool membership (`true` = tool).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
    pub timestamp: usize,
}

impl ToolMask {
    pub fn empty(width: usize, height: usize, timestamp: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
            timestamp,
        }
    }

    pub fn full(width: usize, height: usize, timestamp: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
            timestamp,
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: bool) {
        self.data[v * self.width + u] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Intersection over union; two empty masks have IoU 1.
    pub fn iou(&self, other: &ToolMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Reads an 8-bit mask image; any non-zero value is tool.
    pub fn from_gray(img: &GrayImage, timestamp: usize) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p.0[0] != 0).collect(),
            timestamp,
        }
    }

    /// 255 = tool, 0 = tissue.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }
}

/// Source of tool masks for a frame.
pub trait MaskProvider: Send + Sync {
    fn segment(&self, frame: &RgbImage, index: usize) -> Result<ToolMask>;
}

/// Never reports a tool.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoMask;

impl MaskProvider for NoMask {
    fn segment(&self, frame: &RgbImage, index: usize) -> Result<ToolMask> {
        Ok(ToolMask::empty(frame.width() as usize, frame.height() as usize, index))
    }
}

/// Thresholds blue-dominant chroma, the color signature of simulated tools.
/// Tissue is red-dominant, so `b - r > margin` separates the two.
#[derive(Debug, Clone, Copy)]
pub struct ChromaKey {
    pub margin: i16,
}

impl Default for ChromaKey {
    fn default() -> Self {
        Self { margin: 40 }
    }
}

impl MaskProvider for ChromaKey {
    fn segment(&self, frame: &RgbImage, index: usize) -> Result<ToolMask> {
        Ok(ToolMask {
            width: frame.width() as usize,
            height: frame.height() as usize,
            data: frame
                .pixels()
                .map(|p| p.0[2] as i16 - p.0[0] as i16 > self.margin)
                .collect(),
            timestamp: index,
        })
    }
}

/// Reads `mask_%06d.pgm` files from a directory.
#[derive(Debug, Clone)]
pub struct MaskFiles {
    pub dir: PathBuf,
}

impl MaskFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, index: usize) -> PathBuf {
        mask_file_path(&self.dir, index)
    }
}

pub fn mask_file_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("mask_{index:06}.pgm"))
}

impl MaskProvider for MaskFiles {
    fn segment(&self, frame: &RgbImage, index: usize) -> Result<ToolMask> {
        let path = self.path_for(index);
        if !path.exists() {
            return Err(Error::ingestion(&path, format!("missing mask for frame {index}")));
        }
        let img = image::open(&path).map_err(|e| Error::ingestion(&path, e.to_string()))?.into_luma8();
        if img.dimensions() != frame.dimensions() {
            return Err(Error::ingestion(
                &path,
                format!(
                    "mask is {}x{}, frame is {}x{}",
                    img.width(),
                    img.height(),
                    frame.width(),
                    frame.height()
                ),
            ));
        }
        Ok(ToolMask::from_gray(&img, index))
    }
}

/// Runs `provider` on one frame.
pub fn segment(frame: &RgbImage, index: usize, provider: &dyn MaskProvider) -> Result<ToolMask> {
    provider.segment(frame, index)
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Max (or min) filter with a disk. Pixels outside the image read as `outside`.
fn disk_filter(m: &ToolMask, radius: usize, dilate: bool, outside: bool) -> ToolMask {
    if radius == 0 {
        return m.clone();
    }
    let offsets = disk_offsets(radius);
    let (w, h) = (m.width as isize, m.height as isize);
    let mut out = m.clone();
    for v in 0..h {
        for u in 0..w {
            let hit = offsets.iter().any(|&(dx, dy)| {
                let (x, y) = (u + dx, v + dy);
                let val = if x < 0 || y < 0 || x >= w || y >= h {
                    outside
                } else {
                    m.data[(y * w + x) as usize]
                };
                val == dilate
            });
            out.data[(v * w + u) as usize] = if dilate { hit } else { !hit };
        }
    }
    out
}

pub fn dilate(m: &ToolMask, radius: usize) -> ToolMask {
    disk_filter(m, radius, true, false)
}

/// Erosion treating the outside of the image as tool, so closing never
/// shrinks a mask along the border.
pub fn erode(m: &ToolMask, radius: usize) -> ToolMask {
    disk_filter(m, radius, false, true)
}

pub fn close(m: &ToolMask, radius: usize) -> ToolMask {
    erode(&dilate(m, radius), radius)
}

/// Disk closing (fills pinholes) followed by a safety dilation.
pub fn morph_refine(m: &ToolMask, close_radius: usize, dilate_radius: usize) -> ToolMask {
    dilate(&close(m, close_radius), dilate_radius)
}

/// Default `(close, dilate)` radii for an image width: (3, 2) at 640 px.
pub fn default_radii(width: usize) -> (usize, usize) {
    let s = width as f64 / 640.0;
    ((3.0 * s).round() as usize, (2.0 * s).round() as usize)
}

/// Marks tool pixels invalid; every other pixel is left untouched.
pub fn apply_mask(d: &DepthMap, m: &ToolMask) -> Result<DepthMap> {
    if (d.width, d.height) != (m.width, m.height) {
        return Err(Error::InvalidInput(format!(
            "depth {}x{} vs mask {}x{}",
            d.width, d.height, m.width, m.height
        )));
    }
    let mut out = d.clone();
    for (i, &tool) in m.data.iter().enumerate() {
        if tool {
            out.invalidate(i, DepthStatus::Invalid);
        }
    }
    Ok(out)
}
