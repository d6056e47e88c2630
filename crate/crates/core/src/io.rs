//! File formats and the on-disk sequence layout.
//!
//! A sequence directory holds `calibration.json`, `left_%06d.ppm` and
//! `right_%06d.ppm` (binary P6), and optionally `depth_%06d.pfm` (meters) and
//! `mask_%06d.pgm` (nonzero = tool).

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::UnitQuaternion;

use crate::deformation::NodeGraph;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::imaging::RgbImage;
use crate::segmentation::mask_file_path;
use crate::sim::GroundTruthFrame;
use crate::stereo::DepthMap;
use crate::surfel::Surfel;

pub const CALIBRATION_FILE: &str = "calibration.json";

pub fn left_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("left_{i:06}.ppm"))
}

pub fn right_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("right_{i:06}.ppm"))
}

pub fn depth_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("depth_{i:06}.pfm"))
}

/// Writes a single-channel little-endian PFM. Invalid pixels are stored as 0.
pub fn write_pfm(path: &Path, d: &DepthMap) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "Pf\n{} {}\n-1.0\n", d.width, d.height)?;
    // PFM stores rows bottom to top.
    for v in (0..d.height).rev() {
        for u in 0..d.width {
            let z = d.get(u, v).unwrap_or(0.0) as f32;
            f.write_all(&z.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn read_token(r: &mut impl BufRead) -> std::io::Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    Ok(String::from_utf8_lossy(&tok).into_owned())
}

/// Reads a single-channel PFM as depth in meters; non-finite or non-positive
/// values become invalid pixels.
pub fn read_pfm(path: &Path, timestamp: usize) -> Result<DepthMap> {
    let bad = |m: &str| Error::ingestion(path, m.to_string());
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::ingestion(path, e.to_string()))?);
    let magic = read_token(&mut r)?;
    if magic != "Pf" {
        return Err(bad("not a single-channel PFM"));
    }
    let w: usize = read_token(&mut r)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = read_token(&mut r)?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = read_token(&mut r)?.parse().map_err(|_| bad("bad scale"))?;
    let mut raw = vec![0u8; 4 * w * h];
    r.read_exact(&mut raw).map_err(|_| bad("truncated pixel data"))?;
    let mut d = DepthMap::invalid(w, h, timestamp);
    for v in 0..h {
        for u in 0..w {
            let o = 4 * ((h - 1 - v) * w + u);
            let b = [raw[o], raw[o + 1], raw[o + 2], raw[o + 3]];
            let z = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) } as f64;
            if z.is_finite() && z > 0.0 {
                d.set_valid(v * w + u, z);
            }
        }
    }
    Ok(d)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    Ok(img.into_rgb8())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Pnm)?;
    Ok(())
}

/// ASCII PLY of surfels with normal, color, confidence and radius.
pub fn write_surfel_ply(path: &Path, surfels: &[Surfel]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "ply\nformat ascii 1.0\nelement vertex {}", surfels.len())?;
    for p in ["x", "y", "z", "nx", "ny", "nz"] {
        writeln!(f, "property float {p}")?;
    }
    for p in ["red", "green", "blue"] {
        writeln!(f, "property uchar {p}")?;
    }
    writeln!(f, "property float confidence\nproperty float radius\nproperty int last_seen\nend_header")?;
    for s in surfels {
        let [r, g, b] = s.color_u8();
        writeln!(
            f,
            "{} {} {} {} {} {} {r} {g} {b} {} {} {}",
            s.position.x as f32,
            s.position.y as f32,
            s.position.z as f32,
            s.normal.x as f32,
            s.normal.y as f32,
            s.normal.z as f32,
            s.confidence as f32,
            s.radius as f32,
            s.last_seen
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Reads back the vertex positions of a PLY written by [`write_surfel_ply`].
pub fn read_ply_positions(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |m: &str| Error::ingestion(path, m.to_string());
    let (header, body) = text.split_once("end_header\n").ok_or_else(|| bad("missing end_header"))?;
    let n: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad("missing vertex count"))?;
    body.lines()
        .take(n)
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().take(3).filter_map(|t| t.parse().ok()).collect();
            (v.len() == 3).then(|| [v[0], v[1], v[2]]).ok_or_else(|| bad("malformed vertex"))
        })
        .collect()
}

/// ASCII PLY of node positions with the translation magnitude per node.
pub fn write_node_ply(path: &Path, g: &NodeGraph) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(
        f,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float translation\nend_header",
        g.len()
    )?;
    for n in &g.nodes {
        writeln!(
            f,
            "{} {} {} {}",
            n.position.x as f32,
            n.position.y as f32,
            n.position.z as f32,
            n.translation.norm() as f32
        )?;
    }
    f.flush()?;
    Ok(())
}

/// One row per frame: translation, rotation quaternion and a flag for frames
/// whose registration failed.
pub fn write_trajectory_csv(path: &Path, poses: &[RigidPose], flagged: &[usize]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "frame,tx,ty,tz,qw,qx,qy,qz,flagged")?;
    for (i, p) in poses.iter().enumerate() {
        let q = UnitQuaternion::from_matrix(&p.rotation);
        writeln!(
            f,
            "{i},{},{},{},{},{},{},{},{}",
            p.translation.x,
            p.translation.y,
            p.translation.z,
            q.w,
            q.i,
            q.j,
            q.k,
            u8::from(flagged.contains(&i))
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes simulator frames in the sequence layout, including ground-truth
/// depth and masks.
pub fn write_sequence(dir: &Path, k: &CameraIntrinsics, frames: &[GroundTruthFrame]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    k.write_json_file(&dir.join(CALIBRATION_FILE))?;
    for f in frames {
        write_frame(dir, f)?;
    }
    Ok(())
}

pub fn write_frame(dir: &Path, f: &GroundTruthFrame) -> Result<()> {
    write_ppm(&left_path(dir, f.index), &f.left)?;
    write_ppm(&right_path(dir, f.index), &f.right)?;
    write_pfm(&depth_path(dir, f.index), &f.depth)?;
    f.tool_mask.to_gray().save_with_format(mask_file_path(dir, f.index), image::ImageFormat::Pnm)?;
    Ok(())
}

/// One frame of input.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub index: usize,
    pub left: RgbImage,
    pub right: RgbImage,
    /// Externally supplied depth, when a depth directory is in use.
    pub depth: Option<DepthMap>,
}

/// A sequence directory, scanned but not yet loaded.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub dir: PathBuf,
    /// `None` only for an empty directory.
    pub intrinsics: Option<CameraIntrinsics>,
    pub indices: Vec<usize>,
    pub depth_dir: Option<PathBuf>,
}

fn frame_index(name: &str, prefix: &str, ext: &str) -> Option<usize> {
    let digits = name.strip_prefix(prefix)?.strip_suffix(ext)?;
    (digits.len() == 6 && digits.bytes().all(|b| b.is_ascii_digit())).then(|| digits.parse().ok())?
}

/// Scans a sequence directory. Frame numbers must run from 0 without gaps
/// and every left image needs its right partner.
pub fn ingest(dir: &Path, depth_dir: Option<&Path>) -> Result<Sequence> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::ingestion(dir, e.to_string()))?;
    let mut left = BTreeSet::new();
    let mut right = BTreeSet::new();
    for e in entries {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(i) = frame_index(&name, "left_", ".ppm") {
            left.insert(i);
        } else if let Some(i) = frame_index(&name, "right_", ".ppm") {
            right.insert(i);
        }
    }
    if left.is_empty() && right.is_empty() {
        return Ok(Sequence {
            dir: dir.to_path_buf(),
            intrinsics: None,
            indices: Vec::new(),
            depth_dir: depth_dir.map(Path::to_path_buf),
        });
    }
    let all: BTreeSet<usize> = left.union(&right).copied().collect();
    let last = *all.iter().next_back().expect("non-empty");
    let missing: Vec<String> = (0..=last).filter(|i| !all.contains(i)).map(|i| i.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::ingestion(dir, format!("missing frame indices: {}", missing.join(", "))));
    }
    if let Some(i) = all.iter().find(|i| !left.contains(i)) {
        return Err(Error::ingestion(left_path(dir, *i), "left image missing"));
    }
    if let Some(i) = all.iter().find(|i| !right.contains(i)) {
        return Err(Error::ingestion(right_path(dir, *i), "right image missing"));
    }
    let k = CameraIntrinsics::from_json_file(&dir.join(CALIBRATION_FILE))?;
    Ok(Sequence {
        dir: dir.to_path_buf(),
        intrinsics: Some(k),
        indices: all.into_iter().collect(),
        depth_dir: depth_dir.map(Path::to_path_buf),
    })
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Loads frame `i` and checks it against the calibration.
    pub fn load(&self, i: usize) -> Result<FrameBundle> {
        let k = self
            .intrinsics
            .as_ref()
            .ok_or_else(|| Error::ingestion(&self.dir, "no frames"))?;
        let check = |path: &Path, w: u32, h: u32| -> Result<()> {
            if (w as usize, h as usize) != (k.width, k.height) {
                return Err(Error::ingestion(
                    path,
                    format!("image is {w}x{h}, calibration says {}x{}", k.width, k.height),
                ));
            }
            Ok(())
        };
        let lp = left_path(&self.dir, i);
        let rp = right_path(&self.dir, i);
        let left = read_ppm(&lp)?;
        check(&lp, left.width(), left.height())?;
        let right = read_ppm(&rp)?;
        check(&rp, right.width(), right.height())?;
        let depth = match &self.depth_dir {
            Some(d) => {
                let p = depth_path(d, i);
                let dm = read_pfm(&p, i)?;
                check(&p, dm.width as u32, dm.height as u32)?;
                Some(dm)
            }
            None => None,
        };
        Ok(FrameBundle { index: i, left, right, depth })
    }
}
