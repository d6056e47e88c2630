//! Embedded deformation graph: node sampling, skinning, warping and the
//! non-rigid solve with an as-rigid-as-possible regularizer.
//!
//! Node `j` at canonical position `v_j` carries a rotation `R_j` about its own
//! position and a translation `t_j`:
//!
//! ```text
//! T_j(x) = R_j (x − v_j) + v_j + t_j
//! ```
//!
//! A point is warped by blending `T_j(x)` over its four nearest nodes with
//! normalized Gaussian weights. Node updates are applied as
//! `R_j ← exp(ω_j) R_j`, `t_j ← t_j + τ_j`.

use std::collections::HashMap;

use nalgebra::{Cholesky, Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::geometry::{skew, so3_exp, Point3, RigidPose, Vec3};
use crate::spatial::SpatialGrid;

/// Nodes blended per point.
pub const SUPPORT_NODES: usize = 4;
/// Points whose raw weights all fall below this are unsupported.
pub const MIN_RAW_WEIGHT: f64 = 1e-6;
/// Distance (in node radii) beyond which a raw weight is below [`MIN_RAW_WEIGHT`].
pub const SUPPORT_REACH: f64 = 5.3;

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationNode {
    pub position: Point3,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub radius: f64,
    pub neighbors: Vec<usize>,
}

impl DeformationNode {
    pub fn new(position: Point3, radius: f64) -> Self {
        Self {
            position,
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
            radius,
            neighbors: Vec::new(),
        }
    }

    #[inline]
    pub fn transform_point(&self, x: &Point3) -> Point3 {
        x + self.displacement(x)
    }

    /// `T_j(x) − x`, written so identity transforms give exactly zero.
    #[inline]
    pub fn displacement(&self, x: &Point3) -> Vec3 {
        (self.rotation - Matrix3::identity()) * (x - self.position) + self.translation
    }

    /// Node position after deformation.
    #[inline]
    pub fn warped_position(&self) -> Point3 {
        self.position + self.translation
    }

    fn apply_step(&mut self, step: &Vector6<f64>) {
        let w = Vec3::new(step[0], step[1], step[2]);
        self.rotation = so3_exp(&w) * self.rotation;
        self.translation += Vec3::new(step[3], step[4], step[5]);
    }
}

/// `exp(−‖x − v_j‖² / (2 r_j²))`.
pub fn skinning_weight(x: &Point3, node: &DeformationNode) -> f64 {
    (-(x - node.position).norm_squared() / (2.0 * node.radius * node.radius)).exp()
}

/// Normalized blend weights of a point's support nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skin {
    pub nodes: [u32; SUPPORT_NODES],
    pub weights: [f64; SUPPORT_NODES],
    pub len: usize,
}

impl Skin {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(|i| (self.nodes[i] as usize, self.weights[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformationParams {
    /// Node spacing and radius (meters).
    pub spacing: f64,
    pub k_neighbors: usize,
    /// Neighbors farther than `neighbor_reach · spacing` are dropped.
    pub neighbor_reach: f64,
    pub lambda_reg: f64,
    pub outer_iterations: usize,
    pub min_step: f64,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
}

impl Default for DeformationParams {
    fn default() -> Self {
        Self {
            spacing: 0.006,
            k_neighbors: 6,
            neighbor_reach: 3.0,
            lambda_reg: 10.0,
            outer_iterations: 4,
            min_step: 1e-6,
            cg_tolerance: 1e-8,
            cg_max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeGraph {
    pub nodes: Vec<DeformationNode>,
    pub spacing: f64,
    pub k_neighbors: usize,
    pub neighbor_reach: f64,
    grid: SpatialGrid,
}

impl PartialEq for NodeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.spacing == other.spacing && self.k_neighbors == other.k_neighbors
    }
}

impl NodeGraph {
    pub fn empty(spacing: f64, k_neighbors: usize) -> Self {
        Self {
            nodes: Vec::new(),
            spacing,
            k_neighbors,
            neighbor_reach: 3.0,
            grid: SpatialGrid::new(spacing),
        }
    }

    pub fn from_params(p: &DeformationParams) -> Self {
        let mut g = Self::empty(p.spacing, p.k_neighbors);
        g.neighbor_reach = p.neighbor_reach;
        g
    }

    /// Farthest-point subsample of `points` until every point lies within
    /// `spacing` of a node, with identity transforms and symmetric kNN links.
    pub fn build(points: &[Point3], spacing: f64, k_neighbors: usize) -> Self {
        let mut g = Self::empty(spacing, k_neighbors);
        if points.is_empty() {
            return g;
        }
        let mut dist = vec![f64::INFINITY; points.len()];
        let mut next = 0usize;
        loop {
            let c = points[next];
            g.push_node(DeformationNode::new(c, spacing));
            let (mut best, mut best_d) = (0usize, -1.0f64);
            for (i, p) in points.iter().enumerate() {
                let d = (p - c).norm_squared().min(dist[i]);
                dist[i] = d;
                if d > best_d {
                    best = i;
                    best_d = d;
                }
            }
            if best_d < spacing * spacing {
                break;
            }
            next = best;
        }
        g.rebuild_neighbors();
        g
    }

    fn push_node(&mut self, node: DeformationNode) {
        self.grid.insert(node.position);
        self.nodes.push(node);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Recomputes symmetric k-nearest-neighbor links among nodes.
    pub fn rebuild_neighbors(&mut self) {
        let reach = self.neighbor_reach * self.spacing;
        let mut links: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(j, n)| {
                self.grid
                    .nearest(&n.position, self.k_neighbors + 1, reach)
                    .into_iter()
                    .map(|(i, _)| i)
                    .filter(|&i| i != j)
                    .take(self.k_neighbors)
                    .collect()
            })
            .collect();
        for j in 0..links.len() {
            for idx in 0..links[j].len() {
                let i = links[j][idx];
                if !links[i].contains(&j) {
                    links[i].push(j);
                }
            }
        }
        for (node, mut l) in self.nodes.iter_mut().zip(links) {
            l.sort_unstable();
            node.neighbors = l;
        }
    }

    /// Adds a node at each point farther than `spacing` from every node
    /// (points processed in order). New nodes inherit the current motion at
    /// their position. Returns the number added.
    pub fn insert_nodes(&mut self, points: &[Point3]) -> usize {
        let mut added = 0;
        for p in points {
            if self.grid.any_within(p, self.spacing) {
                continue;
            }
            let mut node = DeformationNode::new(*p, self.spacing);
            if let Some(skin) = self.skin(p) {
                node.translation = self.warp_point_with(p, &skin) - p;
                let (j, _) = skin.iter().next().expect("non-empty skin");
                node.rotation = self.nodes[j].rotation;
            }
            self.push_node(node);
            added += 1;
        }
        if added > 0 {
            self.rebuild_neighbors();
        }
        added
    }

    fn skin_from(&self, candidates: Vec<(usize, f64)>) -> Option<Skin> {
        let mut skin = Skin {
            nodes: [0; SUPPORT_NODES],
            weights: [0.0; SUPPORT_NODES],
            len: 0,
        };
        let mut total = 0.0;
        let mut any = false;
        for (j, d2) in candidates.into_iter().take(SUPPORT_NODES) {
            let r = self.nodes[j].radius;
            let w = (-d2 / (2.0 * r * r)).exp();
            any |= w >= MIN_RAW_WEIGHT;
            skin.nodes[skin.len] = j as u32;
            skin.weights[skin.len] = w;
            skin.len += 1;
            total += w;
        }
        if !any || !(total > 0.0) {
            return None;
        }
        for w in &mut skin.weights[..skin.len] {
            *w /= total;
        }
        Some(skin)
    }

    /// Support of a canonical-frame point, or `None` if unsupported.
    pub fn skin(&self, x: &Point3) -> Option<Skin> {
        if self.nodes.is_empty() {
            return None;
        }
        self.skin_from(self.grid.nearest(x, SUPPORT_NODES, SUPPORT_REACH * self.spacing))
    }

    /// Support of a point in the deformed frame, measured against warped
    /// node positions.
    pub fn skin_live(&self, y: &Point3, live: &SpatialGrid) -> Option<Skin> {
        if self.nodes.is_empty() {
            return None;
        }
        self.skin_from(live.nearest(y, SUPPORT_NODES, SUPPORT_REACH * self.spacing))
    }

    /// Index over warped node positions, for [`NodeGraph::skin_live`].
    pub fn live_grid(&self) -> SpatialGrid {
        SpatialGrid::from_points(self.spacing, self.nodes.iter().map(|n| n.warped_position()))
    }

    pub fn warp_point_with(&self, x: &Point3, skin: &Skin) -> Point3 {
        let mut d = Vec3::zeros();
        for (j, w) in skin.iter() {
            d += w * self.nodes[j].displacement(x);
        }
        x + d
    }

    pub fn warp_normal_with(&self, n: &Vec3, skin: &Skin) -> Vec3 {
        let mut out = Vec3::zeros();
        for (j, w) in skin.iter() {
            out += w * (self.nodes[j].rotation * n);
        }
        let len = out.norm();
        if len > 0.0 {
            out / len
        } else {
            *n
        }
    }

    /// Warped position, or `None` for an unsupported point.
    pub fn warp_point(&self, x: &Point3) -> Option<Point3> {
        self.skin(x).map(|s| self.warp_point_with(x, &s))
    }

    pub fn warp_normal(&self, x: &Point3, n: &Vec3) -> Option<Vec3> {
        self.skin(x).map(|s| self.warp_normal_with(n, &s))
    }

    /// Blend of per-node inverse transforms, mapping a deformed-frame point
    /// back to the canonical frame.
    pub fn inverse_warp_with(&self, y: &Point3, skin: &Skin) -> Point3 {
        let mut d = Vec3::zeros();
        for (j, w) in skin.iter() {
            let n = &self.nodes[j];
            let rt = n.rotation.transpose();
            d += w * ((rt - Matrix3::identity()) * (y - n.position - n.translation) - n.translation);
        }
        y + d
    }

    pub fn inverse_warp_normal_with(&self, n: &Vec3, skin: &Skin) -> Vec3 {
        let mut out = Vec3::zeros();
        for (j, w) in skin.iter() {
            out += w * (self.nodes[j].rotation.transpose() * n);
        }
        let len = out.norm();
        if len > 0.0 {
            out / len
        } else {
            *n
        }
    }

    /// Displacements `T_j(x) − x` of the support nodes; their spread measures
    /// local motion consistency.
    pub fn displacement_spread(&self, x: &Point3, skin: &Skin) -> f64 {
        let disp: Vec<Vec3> = skin.iter().map(|(j, _)| self.nodes[j].displacement(x)).collect();
        let mean: Vec3 = skin.iter().zip(&disp).map(|((_, w), d)| w * d).sum();
        disp.iter().map(|d| (d - mean).norm()).fold(0.0, f64::max)
    }

    /// Sets every node so that the graph moves points by the rigid motion `g`.
    pub fn set_global_rigid(&mut self, g: &RigidPose) {
        for n in &mut self.nodes {
            n.rotation = g.rotation;
            n.translation = g.apply(&n.position) - n.position;
        }
    }

    pub fn reset_transforms(&mut self) {
        for n in &mut self.nodes {
            n.rotation = Matrix3::identity();
            n.translation = Vec3::zeros();
        }
    }

    /// ARAP residual of the directed edge `j → i`: `T_j v_j − T_i v_j`.
    pub fn arap_residual(&self, j: usize, i: usize) -> Vector3<f64> {
        let (nj, ni) = (&self.nodes[j], &self.nodes[i]);
        nj.warped_position() - ni.transform_point(&nj.position)
    }

    /// Residual and its derivatives with respect to the twists of `j` and `i`.
    pub fn arap_residual_jacobian(&self, j: usize, i: usize) -> (Vector3<f64>, Matrix3x6<f64>, Matrix3x6<f64>) {
        let (nj, ni) = (&self.nodes[j], &self.nodes[i]);
        let b = ni.rotation * (nj.position - ni.position);
        let e = nj.warped_position() - (b + ni.position + ni.translation);
        let mut jj = Matrix3x6::zeros();
        jj.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
        let mut ji = Matrix3x6::zeros();
        ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&b));
        ji.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
        (e, jj, ji)
    }

    /// `Σ_j Σ_{i ∈ N_j} ‖T_j v_j − T_i v_j‖²`.
    pub fn arap_energy(&self) -> f64 {
        let mut e = 0.0;
        for (j, n) in self.nodes.iter().enumerate() {
            for &i in &n.neighbors {
                e += self.arap_residual(j, i).norm_squared();
            }
        }
        e
    }
}

/// One point-to-plane constraint on the warp: `mᵀ (warp(x) − target)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataTerm {
    /// Canonical position of the reference surfel.
    pub point: Point3,
    pub skin: Skin,
    /// World-frame observed position.
    pub target: Point3,
    /// World-frame residual direction (unit).
    pub direction: Vec3,
}

impl DataTerm {
    pub fn residual(&self, g: &NodeGraph) -> f64 {
        self.direction.dot(&(g.warp_point_with(&self.point, &self.skin) - self.target))
    }

    /// Residual and per-node derivatives `(node, ∂r/∂(ω, τ))`.
    pub fn residual_jacobian(&self, g: &NodeGraph) -> (f64, [(usize, Vector6<f64>); SUPPORT_NODES], usize) {
        let m = self.direction;
        let mut disp = Vec3::zeros();
        let mut out = [(0usize, Vector6::zeros()); SUPPORT_NODES];
        for (slot, (j, w)) in self.skin.iter().enumerate() {
            let n = &g.nodes[j];
            let a = n.rotation * (self.point - n.position);
            disp += w * n.displacement(&self.point);
            let c = a.cross(&m) * w;
            out[slot] = (j, Vector6::new(c.x, c.y, c.z, w * m.x, w * m.y, w * m.z));
        }
        (m.dot(&(self.point + disp - self.target)), out, self.skin.len)
    }
}

/// Data energy plus `λ` times the ARAP energy.
pub fn total_energy(g: &NodeGraph, terms: &[DataTerm], lambda_reg: f64) -> f64 {
    let data: f64 = terms.iter().map(|t| t.residual(g).powi(2)).sum();
    data + lambda_reg * g.arap_energy()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DeformationReport {
    pub iterations: usize,
    pub cg_iterations: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Nothing to solve (no data or no nodes); graph unchanged.
    pub no_op: bool,
}

/// Symmetric block-sparse matrix with 6×6 blocks in CSR order.
struct BlockSparse {
    n: usize,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    blocks: Vec<Matrix6<f64>>,
    lookup: HashMap<(usize, usize), usize>,
}

impl BlockSparse {
    fn new(n: usize, mut pattern: Vec<(usize, usize)>) -> Self {
        pattern.extend((0..n).map(|i| (i, i)));
        pattern.sort_unstable();
        pattern.dedup();
        let mut row_start = vec![0; n + 1];
        for &(r, _) in &pattern {
            row_start[r + 1] += 1;
        }
        for r in 0..n {
            row_start[r + 1] += row_start[r];
        }
        let lookup = pattern.iter().enumerate().map(|(k, &rc)| (rc, k)).collect();
        Self {
            n,
            row_start,
            cols: pattern.iter().map(|&(_, c)| c).collect(),
            blocks: vec![Matrix6::zeros(); pattern.len()],
            lookup,
        }
    }

    fn index(&self, r: usize, c: usize) -> usize {
        self.lookup[&(r, c)]
    }

    fn clear(&mut self) {
        self.blocks.iter_mut().for_each(|b| *b = Matrix6::zeros());
    }

    fn mul(&self, x: &[Vector6<f64>], y: &mut [Vector6<f64>]) {
        for r in 0..self.n {
            let mut acc = Vector6::zeros();
            for k in self.row_start[r]..self.row_start[r + 1] {
                acc += self.blocks[k] * x[self.cols[k]];
            }
            y[r] = acc;
        }
    }

    fn diagonal(&self, r: usize) -> &Matrix6<f64> {
        &self.blocks[self.index(r, r)]
    }
}

fn dot(a: &[Vector6<f64>], b: &[Vector6<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Block-Jacobi preconditioned conjugate gradient. Returns iterations used.
fn pcg(a: &BlockSparse, b: &[Vector6<f64>], x: &mut [Vector6<f64>], tol: f64, max_iter: usize) -> usize {
    let n = a.n;
    let precond: Vec<Matrix6<f64>> = (0..n)
        .map(|r| {
            Cholesky::new(*a.diagonal(r))
                .map(|c| c.inverse())
                .unwrap_or_else(Matrix6::identity)
        })
        .collect();
    x.iter_mut().for_each(|v| *v = Vector6::zeros());
    let mut r: Vec<Vector6<f64>> = b.to_vec();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return 0;
    }
    let mut z: Vec<Vector6<f64>> = r.iter().zip(&precond).map(|(ri, m)| m * ri).collect();
    let mut p = z.clone();
    let mut ap = vec![Vector6::zeros(); n];
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        a.mul(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return it;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol * b_norm {
            return it + 1;
        }
        for i in 0..n {
            z[i] = precond[i] * r[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    max_iter
}

const DIAGONAL_DAMPING: f64 = 1e-9;
const MAX_HALVINGS: usize = 8;

/// Gauss-Newton over all node twists. Energy never increases.
pub fn solve_deformation(g: &mut NodeGraph, terms: &[DataTerm], params: &DeformationParams) -> DeformationReport {
    let lambda = params.lambda_reg;
    let n = g.len();
    let initial = total_energy(g, terms, lambda);
    if n == 0 || terms.is_empty() {
        return DeformationReport {
            initial_energy: initial,
            final_energy: initial,
            no_op: true,
            ..Default::default()
        };
    }

    let mut pattern = Vec::new();
    for t in terms {
        for (a, _) in t.skin.iter() {
            for (b, _) in t.skin.iter() {
                pattern.push((a, b));
            }
        }
    }
    for (j, node) in g.nodes.iter().enumerate() {
        for &i in &node.neighbors {
            pattern.push((j, i));
            pattern.push((i, j));
        }
    }
    let mut h = BlockSparse::new(n, pattern);
    let term_blocks: Vec<[usize; SUPPORT_NODES * SUPPORT_NODES]> = terms
        .iter()
        .map(|t| {
            let mut idx = [0usize; SUPPORT_NODES * SUPPORT_NODES];
            for (x, (a, _)) in t.skin.iter().enumerate() {
                for (y, (b, _)) in t.skin.iter().enumerate() {
                    idx[x * SUPPORT_NODES + y] = h.index(a, b);
                }
            }
            idx
        })
        .collect();
    let edges: Vec<(usize, usize, [usize; 4])> = g
        .nodes
        .iter()
        .enumerate()
        .flat_map(|(j, node)| node.neighbors.iter().map(move |&i| (j, i)))
        .map(|(j, i)| (j, i, [h.index(j, j), h.index(i, i), h.index(j, i), h.index(i, j)]))
        .collect();

    let mut energy = initial;
    let mut report = DeformationReport {
        initial_energy: initial,
        ..Default::default()
    };
    let mut grad = vec![Vector6::zeros(); n];
    let mut step = vec![Vector6::zeros(); n];
    for _ in 0..params.outer_iterations {
        h.clear();
        grad.iter_mut().for_each(|v| *v = Vector6::zeros());
        for (t, idx) in terms.iter().zip(&term_blocks) {
            let (r, jac, len) = t.residual_jacobian(g);
            for x in 0..len {
                let (a, ja) = jac[x];
                grad[a] += ja * r;
                for y in 0..len {
                    h.blocks[idx[x * SUPPORT_NODES + y]] += ja * jac[y].1.transpose();
                }
            }
        }
        for &(j, i, [jj, ii, ji, ij]) in &edges {
            let (e, aj, ai) = g.arap_residual_jacobian(j, i);
            h.blocks[jj] += lambda * aj.transpose() * aj;
            h.blocks[ii] += lambda * ai.transpose() * ai;
            h.blocks[ji] += lambda * aj.transpose() * ai;
            h.blocks[ij] += lambda * ai.transpose() * aj;
            grad[j] += lambda * aj.transpose() * e;
            grad[i] += lambda * ai.transpose() * e;
        }
        for r in 0..n {
            let d = h.index(r, r);
            for c in 0..6 {
                h.blocks[d][(c, c)] += DIAGONAL_DAMPING;
            }
        }
        let rhs: Vec<Vector6<f64>> = grad.iter().map(|v| -v).collect();
        report.cg_iterations += pcg(&h, &rhs, &mut step, params.cg_tolerance, params.cg_max_iterations);
        report.iterations += 1;

        let step_norm = dot(&step, &step).sqrt();
        if !(step_norm > 0.0) || !step_norm.is_finite() {
            break;
        }
        let saved: Vec<(Matrix3<f64>, Vec3)> = g.nodes.iter().map(|n| (n.rotation, n.translation)).collect();
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            for (node, s) in g.nodes.iter_mut().zip(&step) {
                node.apply_step(&(s * scale));
            }
            let e = total_energy(g, terms, lambda);
            if e <= energy {
                energy = e;
                accepted = true;
                break;
            }
            for (node, (r, t)) in g.nodes.iter_mut().zip(&saved) {
                node.rotation = *r;
                node.translation = *t;
            }
            scale *= 0.5;
        }
        if !accepted || step_norm * scale < params.min_step {
            break;
        }
    }
    report.final_energy = energy;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_points(nx: usize, ny: usize, step: f64, z: impl Fn(f64, f64) -> f64) -> Vec<Point3> {
        let mut out = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                let (x, y) = (ix as f64 * step, iy as f64 * step);
                out.push(Point3::new(x, y, z(x, y)));
            }
        }
        out
    }

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize()
    }

    fn randomize(g: &mut NodeGraph, rng: &mut impl Rng, rot: f64, trans: f64) {
        for n in &mut g.nodes {
            n.rotation = so3_exp(&(random_unit(rng) * rng.random_range(0.0..rot)));
            n.translation = random_unit(rng) * rng.random_range(0.0..trans);
        }
    }

    #[test]
    fn skinning_weight_examples() {
        let n = DeformationNode::new(Point3::new(1.0, 2.0, 3.0), 0.5);
        assert_eq!(skinning_weight(&n.position, &n), 1.0);
        assert_abs_diff_eq!(skinning_weight(&Point3::new(1.5, 2.0, 3.0), &n), 0.606531, epsilon = 1e-6);
        assert_abs_diff_eq!(skinning_weight(&Point3::new(1.0, 3.0, 3.0), &n), 0.135335, epsilon = 1e-6);
    }

    #[test]
    fn single_surfel_graph() {
        let g = NodeGraph::build(&[Point3::new(0.1, 0.2, 0.3)], 0.01, 6);
        assert_eq!(g.len(), 1);
        assert_eq!(g.nodes[0].position, Point3::new(0.1, 0.2, 0.3));
        assert_eq!(g.nodes[0].rotation, Matrix3::identity());
        assert!(g.nodes[0].neighbors.is_empty());
    }

    #[test]
    fn plane_nodes_respect_spacing() {
        let pts = grid_points(60, 50, 0.0005, |_, _| 0.1);
        let s = 0.004;
        let g = NodeGraph::build(&pts, s, 6);
        assert!(g.len() > 10);
        for a in 0..g.len() {
            for b in a + 1..g.len() {
                assert!((g.nodes[a].position - g.nodes[b].position).norm() >= s * 0.95);
            }
        }
        for p in &pts {
            assert!(g.nodes.iter().any(|n| (n.position - p).norm() < s));
        }
        for (j, n) in g.nodes.iter().enumerate() {
            assert!(!n.neighbors.contains(&j));
            for &i in &n.neighbors {
                assert!(g.nodes[i].neighbors.contains(&j));
            }
        }
    }

    #[test]
    fn separated_clusters_do_not_link() {
        let mut pts = grid_points(20, 20, 0.0005, |_, _| 0.1);
        let gap = 0.004 * 3.5 + 0.0095;
        pts.extend(grid_points(20, 20, 0.0005, |_, _| 0.1).into_iter().map(|p| p + Vec3::new(gap, 0.0, 0.0)));
        let g = NodeGraph::build(&pts, 0.004, 6);
        let left = |p: &Point3| p.x < 0.0095 + 1e-9;
        for n in &g.nodes {
            for &i in &n.neighbors {
                assert_eq!(left(&n.position), left(&g.nodes[i].position));
            }
        }
        // Brute-force kNN oracle within the reach.
        for (j, n) in g.nodes.iter().enumerate() {
            let mut d: Vec<(usize, f64)> = g
                .nodes
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != j)
                .map(|(i, m)| (i, (m.position - n.position).norm_squared()))
                .filter(|(_, d)| *d <= (3.0 * 0.004f64).powi(2))
                .collect();
            d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            for (i, _) in d.into_iter().take(6) {
                assert!(n.neighbors.contains(&i));
            }
        }
    }

    #[test]
    fn identity_and_global_rigid_warps() {
        let pts = grid_points(30, 30, 0.001, |x, y| 0.1 + 0.01 * (x * 50.0).sin() * y);
        let mut g = NodeGraph::build(&pts, 0.005, 6);
        for p in &pts {
            assert_eq!(g.warp_point(p).unwrap(), *p);
        }
        let rigid = RigidPose::from_axis_angle(Vec3::new(0.1, -0.2, 0.3), Vec3::new(0.01, 0.02, -0.03));
        g.set_global_rigid(&rigid);
        assert!(g.arap_energy() < 1e-12);
        for p in &pts {
            assert_abs_diff_eq!(g.warp_point(p).unwrap(), rigid.apply(p), epsilon = 1e-9);
            let n = Vec3::new(0.0, 0.6, -0.8);
            assert_abs_diff_eq!(g.warp_normal(p, &n).unwrap(), rigid.rotate(&n), epsilon = 1e-9);
            let skin = g.skin(p).unwrap();
            let y = g.warp_point_with(p, &skin);
            assert_abs_diff_eq!(g.inverse_warp_with(&y, &skin), *p, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_node_translation() {
        let pts = grid_points(4, 4, 0.01, |_, _| 0.0);
        let mut g = NodeGraph::build(&pts, 0.009, 6);
        assert_eq!(g.len(), 16);
        let q = g.nodes[5].position;
        let skin = g.skin(&q).unwrap();
        let w5 = skin.iter().find(|(j, _)| *j == 5).unwrap().1;
        let raw: Vec<f64> = skin.iter().map(|(j, _)| skinning_weight(&q, &g.nodes[j])).collect();
        assert_abs_diff_eq!(w5, 1.0 / raw.iter().sum::<f64>(), epsilon = 1e-12);
        g.nodes[5].translation = Vec3::new(0.0, 0.0, 0.01);
        assert_abs_diff_eq!(g.warp_point(&q).unwrap(), q + Vec3::new(0.0, 0.0, 0.01) * w5, epsilon = 1e-15);
    }

    #[test]
    fn far_point_is_unsupported() {
        let g = NodeGraph::build(&[Point3::zeros()], 0.01, 6);
        assert!(g.warp_point(&Point3::new(1.0, 0.0, 0.0)).is_none());
        assert!(NodeGraph::empty(0.01, 6).warp_point(&Point3::zeros()).is_none());
    }

    #[test]
    fn arap_examples() {
        let pts = vec![Point3::zeros(), Point3::new(0.01, 0.0, 0.0)];
        let mut g = NodeGraph::build(&pts, 0.008, 6);
        assert_eq!(g.len(), 2);
        assert_eq!(g.arap_energy(), 0.0);
        let delta = Vec3::new(0.001, -0.002, 0.0005);
        g.nodes[1].translation = delta;
        assert_abs_diff_eq!(g.arap_energy(), 2.0 * delta.norm_squared(), epsilon = 1e-18);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = grid_points(5, 5, 0.004, |x, _| x);
        let mut g = NodeGraph::build(&pts, 0.004, 4);
        randomize(&mut g, &mut rng, 0.2, 0.003);
        let e = g.arap_energy();
        // Re-indexing nodes leaves the energy unchanged.
        let perm: Vec<usize> = (0..g.len()).rev().collect();
        let mut h = g.clone();
        for (new, &old) in perm.iter().enumerate() {
            h.nodes[new] = g.nodes[old].clone();
            h.nodes[new].neighbors = g.nodes[old].neighbors.iter().map(|&i| perm.iter().position(|&p| p == i).unwrap()).collect();
        }
        assert_abs_diff_eq!(h.arap_energy(), e, epsilon = 1e-15);
        // Any global rigid transform is free, exactly.
        for _ in 0..10 {
            let r = RigidPose::from_axis_angle(random_unit(&mut rng) * 2.0, random_unit(&mut rng));
            g.set_global_rigid(&r);
            assert!(g.arap_energy() <= 1e-12);
        }
    }

    fn fd_twist(g: &NodeGraph, node: usize, a: usize, h: f64, f: &dyn Fn(&NodeGraph) -> f64) -> f64 {
        let mut e = Vector6::zeros();
        e[a] = h;
        let mut gp = g.clone();
        gp.nodes[node].apply_step(&e);
        let mut gm = g.clone();
        gm.nodes[node].apply_step(&(-e));
        (f(&gp) - f(&gm)) / (2.0 * h)
    }

    fn rel_err(fd: f64, an: f64) -> f64 {
        (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for _ in 0..20 {
            let pts: Vec<Point3> = (0..10)
                .map(|_| Point3::new(rng.random_range(0.0..0.03), rng.random_range(0.0..0.03), rng.random_range(0.09..0.11)))
                .collect();
            let mut g = NodeGraph::build(&pts, 0.006, 4);
            assert!(g.len() <= 10);
            randomize(&mut g, &mut rng, 0.3, 0.005);
            for _ in 0..5 {
                let x = pts[rng.random_range(0..pts.len())] + random_unit(&mut rng) * 0.002;
                let Some(skin) = g.skin(&x) else { continue };
                let term = DataTerm {
                    point: x,
                    skin,
                    target: x + random_unit(&mut rng) * 0.003,
                    direction: random_unit(&mut rng),
                };
                let (_, jac, len) = term.residual_jacobian(&g);
                for &(node, j) in &jac[..len] {
                    for a in 0..6 {
                        let fd = fd_twist(&g, node, a, h, &|gg| term.residual(gg));
                        assert!(rel_err(fd, j[a]) < 1e-4, "data node {node} a {a}: {fd} vs {}", j[a]);
                    }
                }
            }
            for j in 0..g.len() {
                for &i in &g.nodes[j].neighbors.clone() {
                    let (_, aj, ai) = g.arap_residual_jacobian(j, i);
                    for comp in 0..3 {
                        for a in 0..6 {
                            let f = |gg: &NodeGraph| gg.arap_residual(j, i)[comp];
                            let fdj = fd_twist(&g, j, a, h, &f);
                            let fdi = fd_twist(&g, i, a, h, &f);
                            assert!(rel_err(fdj, aj[(comp, a)]) < 1e-4);
                            assert!(rel_err(fdi, ai[(comp, a)]) < 1e-4);
                        }
                    }
                }
            }
        }
    }

    fn terms_for(g: &NodeGraph, pts: &[Point3], target: impl Fn(&Point3) -> Point3) -> Vec<DataTerm> {
        pts.iter()
            .filter_map(|p| {
                let skin = g.skin(p)?;
                let t = target(p);
                let d = t - g.warp_point_with(p, &skin);
                // Residual along the true offset, with a fallback to +z.
                let direction = if d.norm() > 1e-12 { d.normalize() } else { Vec3::z() };
                Some(DataTerm { point: *p, skin, target: t, direction })
            })
            .collect()
    }

    #[test]
    fn zero_residuals_leave_graph_unchanged() {
        let pts = grid_points(20, 20, 0.001, |_, _| 0.1);
        let mut g = NodeGraph::build(&pts, 0.005, 6);
        let before = g.clone();
        let terms = terms_for(&g, &pts, |p| *p);
        let rep = solve_deformation(&mut g, &terms, &DeformationParams::default());
        assert_eq!(rep.final_energy, 0.0);
        assert_eq!(g, before);
        let rep = solve_deformation(&mut g, &[], &DeformationParams::default());
        assert!(rep.no_op);
    }

    #[test]
    fn recovers_smooth_bump_and_energy_decreases() {
        let pts = grid_points(40, 40, 0.001, |_, _| 0.1);
        let mut g = NodeGraph::build(&pts, 0.005, 6);
        let bump = |p: &Point3| p + Vec3::new(0.0, 0.0, 0.003 * (-((p.x - 0.02).powi(2) + (p.y - 0.02).powi(2)) / 2e-4).exp());
        let params = DeformationParams { lambda_reg: 1.0, ..Default::default() };
        let mut last = f64::INFINITY;
        for _ in 0..3 {
            let terms = terms_for(&g, &pts, bump);
            let rep = solve_deformation(&mut g, &terms, &params);
            assert!(rep.final_energy <= rep.initial_energy);
            last = rep.final_energy;
        }
        let err: f64 = pts.iter().map(|p| (g.warp_point(p).unwrap() - bump(p)).norm()).sum::<f64>() / pts.len() as f64;
        assert!(err < 2e-4, "mean error {err}, energy {last}");
    }

    #[test]
    fn huge_regularizer_enforces_rigidity() {
        let pts = grid_points(30, 30, 0.001, |x, y| 0.1 + 0.004 * (x * 200.0).sin() * (y * 150.0).cos());
        let mut g = NodeGraph::build(&pts, 0.006, 6);
        let rigid = RigidPose::from_axis_angle(Vec3::new(0.0, 0.01, 0.005), Vec3::new(0.001, 0.0, 0.0005));
        let params = DeformationParams { lambda_reg: 1e6, outer_iterations: 10, ..Default::default() };
        for _ in 0..3 {
            let terms = terms_for(&g, &pts, |p| rigid.apply(p));
            solve_deformation(&mut g, &terms, &params);
        }
        for a in &g.nodes {
            for b in &g.nodes {
                assert!((a.rotation - b.rotation).norm() < 1e-3);
            }
            let expect = rigid.apply(&a.position) - a.position;
            assert!((a.translation - expect).norm() < 1e-3);
        }
    }

    #[test]
    fn inserted_nodes_follow_current_motion() {
        let pts = grid_points(10, 10, 0.001, |_, _| 0.1);
        let mut g = NodeGraph::build(&pts, 0.004, 6);
        let rigid = RigidPose::from_axis_angle(Vec3::new(0.0, 0.0, 0.1), Vec3::new(0.001, 0.0, 0.0));
        g.set_global_rigid(&rigid);
        let n0 = g.len();
        let added = g.insert_nodes(&[Point3::new(0.015, 0.0, 0.1), Point3::new(0.0005, 0.0, 0.1)]);
        assert_eq!(added, 1);
        assert_eq!(g.len(), n0 + 1);
        let p = Point3::new(0.015, 0.0, 0.1);
        assert_abs_diff_eq!(g.nodes[n0].transform_point(&p), rigid.apply(&p), epsilon = 1e-9);
        assert!(!g.nodes[n0].neighbors.is_empty());
    }
}
