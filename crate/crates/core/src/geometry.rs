//! Pinhole camera model, rigid poses and stereo disparity/depth conversion.
//!
//! Conventions: right-handed camera frame with +z pointing into the scene,
//! pixel origin at the top-left corner, rectified stereo with the right camera
//! displaced by `baseline` along +x so that disparities are non-negative.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Point3 = Vector3<f64>;
pub type Twist = Vector6<f64>;

/// Continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Rectified stereo pinhole intrinsics. The left camera is the reference view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Stereo baseline in meters.
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        baseline: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            baseline,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.baseline]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite intrinsics".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 || self.baseline <= 0.0 {
            return Err(Error::InvalidInput(
                "focal lengths and baseline must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be non-zero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Reads a calibration file with keys `fx, fy, cx, cy, baseline, width, height`.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ingestion(path, format!("cannot read calibration: {e}")))?;
        let k: Self = serde_json::from_str(&text)
            .map_err(|e| Error::ingestion(path, format!("malformed calibration: {e}")))?;
        k.validate()
            .map_err(|e| Error::ingestion(path, e.to_string()))?;
        Ok(k)
    }

    pub fn write_json_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Normalized image-plane coordinates of a pixel.
    #[inline]
    pub fn normalized(&self, p: Pixel) -> (f64, f64) {
        ((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy)
    }
}

/// Lifts a pixel with known depth into the camera frame.
pub fn backproject(p: Pixel, depth: f64, k: &CameraIntrinsics) -> Result<Point3> {
    if !depth.is_finite() || depth <= 0.0 {
        return Err(Error::InvalidInput(format!("depth must be positive, got {depth}")));
    }
    Ok(backproject_unchecked(p, depth, k))
}

#[inline]
pub(crate) fn backproject_unchecked(p: Pixel, depth: f64, k: &CameraIntrinsics) -> Point3 {
    Point3::new(
        (p.u - k.cx) * depth / k.fx,
        (p.v - k.cy) * depth / k.fy,
        depth,
    )
}

/// Projects a camera-frame point onto the image plane.
pub fn project(x: &Point3, k: &CameraIntrinsics) -> Result<Pixel> {
    if !(x.z > 0.0) {
        return Err(Error::BehindCamera(x.z));
    }
    Ok(project_unchecked(x, k))
}

#[inline]
pub(crate) fn project_unchecked(x: &Point3, k: &CameraIntrinsics) -> Pixel {
    Pixel::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy)
}

/// Converts a disparity to metric depth; `None` marks an unmatched pixel.
pub fn disparity_to_depth(disp: f64, k: &CameraIntrinsics) -> Option<f64> {
    if disp.is_finite() && disp > 0.0 {
        Some(k.fx * k.baseline / disp)
    } else {
        None
    }
}

pub fn depth_to_disparity(depth: f64, k: &CameraIntrinsics) -> Option<f64> {
    if depth.is_finite() && depth > 0.0 {
        Some(k.fx * k.baseline / depth)
    } else {
        None
    }
}

/// Cross-product matrix `[w]x`.
#[inline]
pub fn skew(w: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues' formula for the rotation `exp([w]x)`.
pub fn so3_exp(w: &Vec3) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if theta2 < 1e-12 {
        // Taylor expansion keeps the small-angle branch accurate to ~1e-18.
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation vector of a rotation matrix (inverse of [`so3_exp`]).
pub fn so3_log(r: &Matrix3<f64>) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let v = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-9 {
        return v * 0.5;
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near pi the antisymmetric part vanishes; read the axis from the symmetric part.
        let s = (r + Matrix3::identity()) * 0.5;
        let col = (0..3)
            .max_by(|&a, &b| s[(a, a)].total_cmp(&s[(b, b)]))
            .unwrap_or(0);
        let mut axis: Vec3 = s.column(col).into();
        axis /= axis.norm();
        if axis.dot(&v) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    v * (theta / (2.0 * theta.sin()))
}

/// SE(3) element stored as rotation matrix plus translation.
///
/// Acts on points as `x -> R x + t`. Camera poses map camera coordinates to
/// world (canonical) coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Rotation given as an axis-angle vector, followed by a translation.
    pub fn from_axis_angle(rotvec: Vec3, translation: Vec3) -> Self {
        Self::new(so3_exp(&rotvec), translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn apply(&self, x: &Point3) -> Point3 {
        self.rotation * x + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Exponential map of a twist ordered `(wx, wy, wz, tx, ty, tz)`.
    pub fn se3_exp(twist: &Twist) -> RigidPose {
        let w = Vec3::new(twist[0], twist[1], twist[2]);
        let v = Vec3::new(twist[3], twist[4], twist[5]);
        let theta2 = w.norm_squared();
        let k = skew(&w);
        let (b, c) = if theta2 < 1e-12 {
            (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
        } else {
            let theta = theta2.sqrt();
            (
                (1.0 - theta.cos()) / theta2,
                (theta - theta.sin()) / (theta2 * theta),
            )
        };
        let left_jacobian = Matrix3::identity() + k * b + k * k * c;
        RigidPose {
            rotation: so3_exp(&w),
            translation: left_jacobian * v,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }

    /// Largest entry of `RᵀR − I` and `|det R − 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        gram.amax().max((self.rotation.determinant() - 1.0).abs())
    }

    /// Projects the rotation back onto SO(3) via polar decomposition.
    pub fn reorthonormalized(&self) -> RigidPose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = match (svd.u, svd.v_t) {
            (Some(u), Some(vt)) => (u, vt),
            _ => return *self,
        };
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        RigidPose {
            rotation: r,
            translation: self.translation,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|x| x.is_finite()) && self.translation.iter().all(|x| x.is_finite())
    }
}

/// Left-composes a stream of poses and re-orthonormalizes every
/// [`PoseChain::REORTHONORMALIZE_EVERY`] compositions.
#[derive(Debug, Clone, Default)]
pub struct PoseChain {
    pose: RigidPose,
    since_cleanup: usize,
}

impl PoseChain {
    pub const REORTHONORMALIZE_EVERY: usize = 100;

    pub fn new(start: RigidPose) -> Self {
        Self {
            pose: start,
            since_cleanup: 0,
        }
    }

    pub fn push(&mut self, step: &RigidPose) -> &RigidPose {
        self.pose = step.compose(&self.pose);
        self.since_cleanup += 1;
        if self.since_cleanup >= Self::REORTHONORMALIZE_EVERY {
            self.pose = self.pose.reorthonormalized();
            self.since_cleanup = 0;
        }
        &self.pose
    }

    pub fn pose(&self) -> &RigidPose {
        &self.pose
    }
}
