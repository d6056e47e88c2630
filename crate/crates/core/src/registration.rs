//! Projective data association and camera pose estimation.
//!
//! Poses map camera coordinates to canonical (world) coordinates. Reference
//! surfels live in the world frame; observed surfels in the camera frame. For
//! a pair the residual is
//!
//! ```text
//! r(T) = mᵀ (p_ref − T p_obs),   m = R n_obs   (point-to-plane)
//!                                m = R e_z     (depth-only variant)
//! ```
//!
//! i.e. the camera-frame normal (or depth) component of the gap. Updates are
//! applied on the left, `T ← exp(ξ) T`, giving `∂r/∂ξ = [(m × p_ref)ᵀ, −mᵀ]`.

use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_unchecked, CameraIntrinsics, Point3, RigidPose, Twist, Vec3};
use crate::surfel::{Observation, Surfel, NO_SURFEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualKind {
    #[default]
    PointToPlane,
    Depth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub ref_index: usize,
    pub obs_index: usize,
    /// World-frame reference position and normal (after any warp).
    pub ref_position: Point3,
    pub ref_normal: Vec3,
    /// Camera-frame observed position and normal.
    pub obs_position: Point3,
    pub obs_normal: Vec3,
}

#[derive(Debug, Clone, Default)]
pub struct CorrespondenceSet {
    /// Sorted by `obs_index`; each observed surfel appears at most once.
    pub pairs: Vec<Correspondence>,
    /// Observed surfels explained by some reference surfel with agreeing depth.
    pub covered: Vec<bool>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationParams {
    /// Depth agreement threshold (meters).
    pub max_depth_diff: f64,
    /// Normal agreement threshold (degrees).
    pub max_normal_angle: f64,
    pub residual: ResidualKind,
    /// Association/solve rounds.
    pub icp_iterations: usize,
    pub gn_iterations: usize,
    pub min_step: f64,
    /// Down-weight pairs with Tukey's biweight, so locally deforming regions
    /// do not drag the camera.
    pub robust: bool,
    /// Lower bound on the robust residual scale (meters).
    pub min_scale: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            max_depth_diff: 0.01,
            max_normal_angle: 30.0,
            residual: ResidualKind::PointToPlane,
            icp_iterations: 6,
            gn_iterations: 10,
            min_step: 1e-7,
            robust: true,
            min_scale: 1e-5,
        }
    }
}

/// Associates reference surfels (world frame) with observed surfels (camera
/// frame) by projecting through `pose_prev`. Among reference surfels landing
/// on one observed surfel the smallest depth difference wins, ties going to
/// the lower reference index.
pub fn find_correspondences(
    reference: &[Surfel],
    obs: &Observation,
    pose_prev: &RigidPose,
    k: &CameraIntrinsics,
    max_depth_diff: f64,
    max_normal_angle_deg: f64,
) -> CorrespondenceSet {
    associate(reference, obs, pose_prev, k, max_depth_diff, max_normal_angle_deg, true)
}

/// Association; footprint coverage is only traced when `coverage` is set.
fn associate(
    reference: &[Surfel],
    obs: &Observation,
    pose_prev: &RigidPose,
    k: &CameraIntrinsics,
    max_depth_diff: f64,
    max_normal_angle_deg: f64,
    coverage: bool,
) -> CorrespondenceSet {
    let n_obs = obs.len();
    if n_obs == 0 || reference.is_empty() {
        return CorrespondenceSet {
            pairs: Vec::new(),
            covered: vec![false; n_obs],
        };
    }
    let to_cam = pose_prev.inverse();
    let cos_max = max_normal_angle_deg.to_radians().cos();
    let stride = obs.stride as isize;

    // Per reference surfel: the candidate pair (obs index, |Δz|, ref index)
    // and the observed surfels its footprint covers.
    let per_ref: Vec<(Option<(usize, f64, usize)>, Vec<usize>)> = reference
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let p = to_cam.apply(&s.position);
            if p.z <= 0.0 {
                return (None, Vec::new());
            }
            let px = project_unchecked(&p, k);
            let n_cam = to_cam.rotate(&s.normal);
            let mut hits = Vec::new();
            // Cells inside the projected footprint whose depth and normal agree.
            let r_px = (s.radius * k.fx / p.z).max(0.5);
            let reach = if coverage { (r_px / stride as f64).ceil() as isize } else { -1 };
            let (gu, gv) = ((px.u / stride as f64).round() as isize, (px.v / stride as f64).round() as isize);
            for dv in -reach..=reach {
                for du in -reach..=reach {
                    let (cu, cv) = ((gu + du) * stride, (gv + dv) * stride);
                    if cu < 0 || cv < 0 || cu >= obs.width as isize || cv >= obs.height as isize {
                        continue;
                    }
                    let (fu, fv) = (cu as f64 - px.u, cv as f64 - px.v);
                    if fu * fu + fv * fv > r_px * r_px && (du, dv) != (0, 0) {
                        continue;
                    }
                    let j = obs.index[cv as usize * obs.width + cu as usize];
                    if j != NO_SURFEL
                        && (obs.depths[j as usize] - p.z).abs() < max_depth_diff
                        && n_cam.dot(&obs.map.surfels[j as usize].normal) > cos_max
                    {
                        hits.push(j as usize);
                    }
                }
            }
            let pair = obs
                .surfel_near(px.u, px.v)
                .and_then(|j| {
                    let dz = (obs.depths[j] - p.z).abs();
                    (dz < max_depth_diff && n_cam.dot(&obs.map.surfels[j].normal) > cos_max).then_some((j, dz, i))
                })
                .or_else(|| {
                    // Fall back to the closest agreeing cell inside the footprint.
                    hits.iter()
                        .map(|&j| (j, (obs.depths[j] - p.z).abs(), i))
                        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                });
            (pair, hits)
        })
        .collect();

    let mut covered = vec![false; n_obs];
    let mut best: Vec<Option<(f64, usize)>> = vec![None; n_obs];
    for (pair, hits) in per_ref {
        for j in hits {
            covered[j] = true;
        }
        let Some((j, dz, i)) = pair else {
            continue;
        };
        let replace = match best[j] {
            None => true,
            Some((bdz, bi)) => dz < bdz || (dz == bdz && i < bi),
        };
        if replace {
            best[j] = Some((dz, i));
        }
    }
    let pairs = best
        .iter()
        .enumerate()
        .filter_map(|(j, b)| {
            b.map(|(_, i)| {
                covered[j] = true;
                Correspondence {
                    ref_index: i,
                    obs_index: j,
                    ref_position: reference[i].position,
                    ref_normal: reference[i].normal,
                    obs_position: obs.map.surfels[j].position,
                    obs_normal: obs.map.surfels[j].normal,
                }
            })
        })
        .collect();
    CorrespondenceSet { pairs, covered }
}

#[inline]
fn direction(c: &Correspondence, pose: &RigidPose, kind: ResidualKind) -> Vec3 {
    match kind {
        ResidualKind::PointToPlane => pose.rotate(&c.obs_normal),
        ResidualKind::Depth => pose.rotation.column(2).into_owned(),
    }
}

/// Residual of one pair at camera pose `pose`.
pub fn residual(c: &Correspondence, pose: &RigidPose, kind: ResidualKind) -> f64 {
    direction(c, pose, kind).dot(&(c.ref_position - pose.apply(&c.obs_position)))
}

/// Residual and its derivative with respect to a left-applied twist
/// `(ω, τ)` at `ξ = 0`.
pub fn residual_jacobian(c: &Correspondence, pose: &RigidPose, kind: ResidualKind) -> (f64, Vector6<f64>) {
    let m = direction(c, pose, kind);
    let r = m.dot(&(c.ref_position - pose.apply(&c.obs_position)));
    let a = m.cross(&c.ref_position);
    (r, Vector6::new(a.x, a.y, a.z, -m.x, -m.y, -m.z))
}

pub fn energy(pairs: &[Correspondence], pose: &RigidPose, kind: ResidualKind) -> f64 {
    pairs.iter().map(|c| residual(c, pose, kind).powi(2)).sum()
}

fn weighted_energy(pairs: &[Correspondence], weights: Option<&[f64]>, pose: &RigidPose, kind: ResidualKind) -> f64 {
    match weights {
        None => energy(pairs, pose, kind),
        Some(w) => pairs.iter().zip(w).map(|(c, w)| w * residual(c, pose, kind).powi(2)).sum(),
    }
}

/// Tukey tuning constant for 95% efficiency under Gaussian noise.
const TUKEY_C: f64 = 4.685;

/// Tukey biweights with the scale estimated from the median absolute residual.
pub fn tukey_weights(pairs: &[Correspondence], pose: &RigidPose, kind: ResidualKind, min_scale: f64) -> Vec<f64> {
    let r: Vec<f64> = pairs.iter().map(|c| residual(c, pose, kind)).collect();
    let mut abs: Vec<f64> = r.iter().map(|x| x.abs()).collect();
    if abs.is_empty() {
        return Vec::new();
    }
    let mid = abs.len() / 2;
    let (_, med, _) = abs.select_nth_unstable_by(mid, f64::total_cmp);
    let c = TUKEY_C * (1.4826 * *med).max(min_scale);
    r.iter()
        .map(|x| {
            let u = x / c;
            if u.abs() >= 1.0 {
                0.0
            } else {
                (1.0 - u * u).powi(2)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSolution {
    pub pose: RigidPose,
    pub iterations: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
}

const DAMPING: f64 = 1e-6;
const DAMPING_CONDITION: f64 = 1e-10;
const RANK_CONDITION: f64 = 1e-14;
const MAX_HALVINGS: usize = 8;

/// Solves `H ξ = -g`, damping ill-conditioned systems. Rank-deficient
/// systems are an error.
pub(crate) fn solve_normal_equations(h: &Matrix6<f64>, g: &Vector6<f64>) -> Result<Twist> {
    let eig = SymmetricEigen::new(*h);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min / max < RANK_CONDITION {
        return Err(Error::DegenerateRegistration(format!(
            "normal equations are rank deficient (eigenvalues {min:.3e}..{max:.3e})"
        )));
    }
    let mut hd = *h;
    if min / max < DAMPING_CONDITION {
        for i in 0..6 {
            hd[(i, i)] += DAMPING;
        }
    }
    hd.cholesky()
        .map(|ch| -ch.solve(g))
        .ok_or_else(|| Error::DegenerateRegistration("normal equations not positive definite".into()))
}

/// Gauss-Newton over SE(3) with step halving; energy never increases.
pub fn solve_camera_pose(
    pairs: &[Correspondence],
    pose_init: &RigidPose,
    kind: ResidualKind,
    max_iterations: usize,
    min_step: f64,
) -> Result<PoseSolution> {
    solve_weighted(pairs, None, pose_init, kind, max_iterations, min_step)
}

/// Weighted least squares; the energy is `Σ w r²`.
fn solve_weighted(
    pairs: &[Correspondence],
    weights: Option<&[f64]>,
    pose_init: &RigidPose,
    kind: ResidualKind,
    max_iterations: usize,
    min_step: f64,
) -> Result<PoseSolution> {
    if pairs.len() < 6 {
        return Err(Error::DegenerateRegistration(format!(
            "{} correspondences, need at least 6",
            pairs.len()
        )));
    }
    let mut pose = *pose_init;
    let mut e = weighted_energy(pairs, weights, &pose, kind);
    let initial_energy = e;
    let mut iterations = 0;
    for _ in 0..max_iterations {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (i, c) in pairs.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                continue;
            }
            let (r, j) = residual_jacobian(c, &pose, kind);
            h += j * j.transpose() * w;
            g += j * (r * w);
        }
        let step = solve_normal_equations(&h, &g)?;
        if step.norm() == 0.0 {
            break;
        }
        iterations += 1;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = RigidPose::se3_exp(&(step * scale)).compose(&pose).reorthonormalized();
            let ec = weighted_energy(pairs, weights, &candidate, kind);
            if ec <= e {
                accepted = Some((candidate, ec));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, ec)) = accepted else {
            break;
        };
        pose = candidate;
        e = ec;
        if step.norm() * scale < min_step {
            break;
        }
    }
    Ok(PoseSolution {
        pose,
        iterations,
        initial_energy,
        final_energy: e,
    })
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub pose: RigidPose,
    pub correspondences: CorrespondenceSet,
    pub energy: f64,
}

/// Alternates association and pose solving, starting from `pose_prev`.
pub fn register(
    reference: &[Surfel],
    obs: &Observation,
    pose_prev: &RigidPose,
    k: &CameraIntrinsics,
    params: &RegistrationParams,
) -> Result<RegistrationResult> {
    let mut pose = *pose_prev;
    let mut energy_now = f64::INFINITY;
    for _ in 0..params.icp_iterations.max(1) {
        let corr = associate(reference, obs, &pose, k, params.max_depth_diff, params.max_normal_angle, false);
        let weights = params
            .robust
            .then(|| tukey_weights(&corr.pairs, &pose, params.residual, params.min_scale));
        let sol = solve_weighted(
            &corr.pairs,
            weights.as_deref(),
            &pose,
            params.residual,
            params.gn_iterations,
            params.min_step,
        )?;
        let delta = sol.pose.compose(&pose.inverse());
        pose = sol.pose;
        energy_now = sol.final_energy;
        if delta.translation.norm() < 1e-7 && delta.rotation_angle() < 1e-7 {
            break;
        }
    }
    let correspondences =
        find_correspondences(reference, obs, &pose, k, params.max_depth_diff, params.max_normal_angle);
    Ok(RegistrationResult {
        pose,
        correspondences,
        energy: energy_now,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stereo::DepthMap;
    use crate::surfel::{build_observation, ObservationParams};
    use crate::imaging::RgbImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut impl Rng) -> Vec3 {
        Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize()
    }

    fn random_pose(rng: &mut impl Rng, rot: f64, trans: f64) -> RigidPose {
        let w = unit(rng) * rng.random_range(0.0..rot);
        let t = unit(rng) * rng.random_range(0.0..trans);
        RigidPose::from_axis_angle(w, t)
    }

    /// Pairs generated so that `truth` is the exact solution.
    fn synthetic_pairs(rng: &mut impl Rng, truth: &RigidPose, n: usize) -> Vec<Correspondence> {
        (0..n)
            .map(|i| {
                let obs_position = Point3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(0.08..0.12));
                let obs_normal = unit(rng);
                Correspondence {
                    ref_index: i,
                    obs_index: i,
                    ref_position: truth.apply(&obs_position),
                    ref_normal: truth.rotate(&obs_normal),
                    obs_position,
                    obs_normal,
                }
            })
            .collect()
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for kind in [ResidualKind::PointToPlane, ResidualKind::Depth] {
            for _ in 0..100 {
                let pose = random_pose(&mut rng, 0.5, 0.05);
                let c = Correspondence {
                    ref_index: 0,
                    obs_index: 0,
                    ref_position: Point3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(0.05..0.2)),
                    ref_normal: unit(&mut rng),
                    obs_position: Point3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(0.05..0.2)),
                    obs_normal: unit(&mut rng),
                };
                let (_, j) = residual_jacobian(&c, &pose, kind);
                for a in 0..6 {
                    let mut e = Twist::zeros();
                    e[a] = h;
                    let rp = residual(&c, &RigidPose::se3_exp(&e).compose(&pose), kind);
                    let rm = residual(&c, &RigidPose::se3_exp(&(-e)).compose(&pose), kind);
                    let fd = (rp - rm) / (2.0 * h);
                    let rel = (fd - j[a]).abs() / fd.abs().max(j[a].abs()).max(1e-3);
                    assert!(rel < 1e-4, "{kind:?} a={a} fd={fd} an={}", j[a]);
                }
            }
        }
    }

    #[test]
    fn recovers_synthetic_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = RigidPose::from_axis_angle(Vec3::new(0.0, 1f64.to_radians(), 0.0), Vec3::new(0.002, 0.0, 0.0));
        let pairs = synthetic_pairs(&mut rng, &truth, 200);
        let sol = solve_camera_pose(&pairs, &RigidPose::identity(), ResidualKind::PointToPlane, 10, 1e-7).unwrap();
        let err = sol.pose.compose(&truth.inverse());
        assert!(err.translation.norm() < 1e-9 && err.rotation_angle() < 1e-9);
        assert!(sol.final_energy <= sol.initial_energy);
    }

    #[test]
    fn zero_residual_keeps_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = random_pose(&mut rng, 0.2, 0.01);
        let pairs = synthetic_pairs(&mut rng, &truth, 50);
        let sol = solve_camera_pose(&pairs, &truth, ResidualKind::PointToPlane, 10, 1e-7).unwrap();
        assert!(sol.pose.compose(&truth.inverse()).translation.norm() < 1e-12);
        assert!(sol.pose.compose(&truth.inverse()).rotation_angle() < 1e-9);
    }

    #[test]
    fn too_few_or_degenerate_pairs_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs = synthetic_pairs(&mut rng, &RigidPose::identity(), 5);
        assert!(matches!(
            solve_camera_pose(&pairs, &RigidPose::identity(), ResidualKind::PointToPlane, 10, 1e-7),
            Err(Error::DegenerateRegistration(_))
        ));
        // All normals equal: a plane cannot pin in-plane translation.
        let mut pairs = synthetic_pairs(&mut rng, &RigidPose::identity(), 50);
        for c in &mut pairs {
            c.obs_normal = Vec3::new(0.0, 0.0, -1.0);
            c.ref_normal = c.obs_normal;
            c.obs_position.z = 0.1;
            c.ref_position = c.obs_position;
        }
        assert!(matches!(
            solve_camera_pose(&pairs, &RigidPose::identity(), ResidualKind::PointToPlane, 10, 1e-7),
            Err(Error::DegenerateRegistration(_))
        ));
    }

    #[test]
    fn energy_is_monotone_from_noisy_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = random_pose(&mut rng, 0.05, 0.005);
        let mut pairs = synthetic_pairs(&mut rng, &truth, 300);
        for c in &mut pairs {
            c.ref_position += unit(&mut rng) * 0.0005;
        }
        let mut pose = RigidPose::identity();
        let mut e = energy(&pairs, &pose, ResidualKind::PointToPlane);
        for _ in 0..5 {
            let sol = solve_camera_pose(&pairs, &pose, ResidualKind::PointToPlane, 1, 1e-7).unwrap();
            assert!(sol.final_energy <= e);
            e = sol.final_energy;
            pose = sol.pose;
        }
    }

    #[test]
    fn conjugation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = random_pose(&mut rng, 0.03, 0.003);
        let mut pairs = synthetic_pairs(&mut rng, &truth, 200);
        for c in &mut pairs {
            c.ref_position += unit(&mut rng) * 0.0003;
        }
        let g = random_pose(&mut rng, 1.0, 0.1);
        let moved: Vec<Correspondence> = pairs
            .iter()
            .map(|c| Correspondence {
                ref_position: g.apply(&c.ref_position),
                ref_normal: g.rotate(&c.ref_normal),
                obs_position: g.apply(&c.obs_position),
                obs_normal: g.rotate(&c.obs_normal),
                ..*c
            })
            .collect();
        let a = solve_camera_pose(&pairs, &RigidPose::identity(), ResidualKind::PointToPlane, 10, 1e-12).unwrap();
        let b = solve_camera_pose(&moved, &RigidPose::identity(), ResidualKind::PointToPlane, 10, 1e-12).unwrap();
        let expect = g.compose(&a.pose).compose(&g.inverse());
        let diff = b.pose.compose(&expect.inverse());
        assert!(diff.translation.norm() < 1e-6 && diff.rotation_angle() < 1e-6, "{diff:?}");
    }

    fn bumpy_depth(k: &CameraIntrinsics) -> DepthMap {
        let mut z = Vec::new();
        for v in 0..k.height {
            for u in 0..k.width {
                let (x, y) = (u as f64 / 10.0, v as f64 / 13.0);
                z.push(0.1 + 0.004 * x.sin() * y.cos());
            }
        }
        DepthMap::from_depths(k.width, k.height, &z, 0).unwrap()
    }

    #[test]
    fn self_association_is_identity() {
        let k = CameraIntrinsics::new(300.0, 300.0, 40.0, 30.0, 0.005, 80, 60).unwrap();
        let obs = build_observation(&bumpy_depth(&k), &RgbImage::new(80, 60), &k, &RigidPose::identity(), 0, &ObservationParams::default());
        let c = find_correspondences(&obs.map.surfels, &obs, &RigidPose::identity(), &k, 0.01, 30.0);
        assert_eq!(c.len(), obs.len());
        for p in &c.pairs {
            assert_eq!(p.ref_index, p.obs_index);
            assert_eq!(residual(p, &RigidPose::identity(), ResidualKind::PointToPlane), 0.0);
        }
        assert!(c.covered.iter().all(|&b| b));
        let empty = build_observation(&DepthMap::invalid(80, 60, 0), &RgbImage::new(80, 60), &k, &RigidPose::identity(), 0, &ObservationParams::default());
        let c = find_correspondences(&obs.map.surfels, &empty, &RigidPose::identity(), &k, 0.01, 30.0);
        assert!(c.is_empty());
    }

    #[test]
    fn icp_recovers_small_motion() {
        let k = CameraIntrinsics::new(300.0, 300.0, 40.0, 30.0, 0.005, 80, 60).unwrap();
        let d = bumpy_depth(&k);
        let reference = build_observation(&d, &RgbImage::new(80, 60), &k, &RigidPose::identity(), 0, &ObservationParams::default());
        // Moving the surface by `truth` is equivalent to observing it from `truth⁻¹`.
        let truth = RigidPose::from_axis_angle(Vec3::new(0.0, 0.2f64.to_radians(), 0.0), Vec3::new(0.0005, -0.0003, 0.0));
        let world: Vec<Surfel> = reference.map.surfels.iter().map(|s| s.transformed(&truth)).collect();
        let res = register(&world, &reference, &RigidPose::identity(), &k, &RegistrationParams::default()).unwrap();
        let err = res.pose.compose(&truth.inverse());
        assert!(err.translation.norm() < 1e-6, "{:?}", err.translation);
        assert!(err.rotation_angle() < 1e-5);
    }
}
