//! Integration of observed surfels into the canonical model: pairwise fusion,
//! gated admission of new surfels and removal of stale ones.

use serde::{Deserialize, Serialize};

use crate::deformation::NodeGraph;
use crate::error::{Error, Result};
use crate::spatial::SpatialGrid;
use crate::surfel::{Surfel, SurfelMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Confidence sum required around a candidate away from the frontier.
    pub conf_admit_threshold: f64,
    /// Meters.
    pub neighborhood_radius: f64,
    /// Largest allowed spread of support-node displacements (meters).
    pub motion_consistency_threshold: f64,
    /// Frames.
    pub max_age: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            conf_admit_threshold: 2.0,
            neighborhood_radius: 0.005,
            motion_consistency_threshold: 0.002,
            max_age: 30,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.conf_admit_threshold > 0.0
            && self.neighborhood_radius > 0.0
            && self.motion_consistency_threshold > 0.0
            && self.max_age > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("fusion thresholds must be strictly positive".into()))
        }
    }
}

/// Confidence-weighted merge of a model surfel with an observation already
/// expressed in the model frame. `None` when the normals face opposite ways.
pub fn fuse_pair(r: &Surfel, o: &Surfel, t_now: usize) -> Option<Surfel> {
    if r.normal.dot(&o.normal) < 0.0 {
        return None;
    }
    let c = r.confidence + o.confidence;
    if o.confidence == 0.0 || !(c > 0.0) {
        return Some(Surfel { last_seen: t_now, ..r.clone() });
    }
    let (wr, wo) = (r.confidence, o.confidence);
    let normal = (wr * r.normal + wo * o.normal).try_normalize(0.0).unwrap_or(r.normal);
    let mut color = [0.0f32; 3];
    for (k, out) in color.iter_mut().enumerate() {
        *out = ((wr * r.color[k] as f64 + wo * o.color[k] as f64) / c) as f32;
    }
    Some(Surfel {
        position: (wr * r.position + wo * o.position) / c,
        normal,
        confidence: c,
        last_seen: t_now,
        radius: r.radius.min(o.radius),
        color,
    })
}

/// Indices of the candidates that pass admission, evaluated against the model
/// as it stood before this call; admitted surfels are appended in order.
pub fn admit_new(
    map: &mut SurfelMap,
    candidates: &[Surfel],
    graph: &NodeGraph,
    cfg: &FusionConfig,
    t_now: usize,
) -> Vec<usize> {
    let r = cfg.neighborhood_radius;
    let grid = SpatialGrid::from_points(r, map.surfels.iter().map(|s| s.position));
    let admitted: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, cand)| {
            let p = &cand.position;
            let frontier = !grid.any_within(p, 2.0 * r);
            let supported = frontier || {
                let sum: f64 = grid.within(p, r).iter().map(|&(i, _)| map.surfels[i].confidence).sum();
                sum >= cfg.conf_admit_threshold
            };
            supported && motion_spread(graph, p) < cfg.motion_consistency_threshold
        })
        .map(|(i, _)| i)
        .collect();
    for &i in &admitted {
        map.surfels.push(Surfel {
            last_seen: t_now,
            ..candidates[i].clone()
        });
    }
    admitted
}

/// Spread of the support nodes' displacements at `p`; zero where the graph
/// has no support.
pub fn motion_spread(graph: &NodeGraph, p: &crate::geometry::Point3) -> f64 {
    graph.skin(p).map_or(0.0, |s| graph.displacement_spread(p, &s))
}

/// Removes surfels unseen for more than `max_age` frames whose confidence is
/// still below the admission threshold. Returns the number removed.
pub fn prune_stale(map: &mut SurfelMap, t_now: usize, cfg: &FusionConfig) -> usize {
    let before = map.surfels.len();
    map.surfels.retain(|s| !is_stale(s, t_now, cfg));
    before - map.surfels.len()
}

/// Unseen for more than `max_age` frames without reaching the admission confidence.
pub fn is_stale(s: &Surfel, t_now: usize, cfg: &FusionConfig) -> bool {
    t_now.saturating_sub(s.last_seen) > cfg.max_age && s.confidence < cfg.conf_admit_threshold
}

/// Per-frame fusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FusionStats {
    pub frame: usize,
    pub fused: usize,
    pub admitted: usize,
    pub pruned: usize,
    pub map_size: usize,
}
