//! Uniform-grid spatial index over 3D points.

use std::collections::HashMap;

use crate::geometry::Point3;

type Cell = (i64, i64, i64);

/// Buckets point indices by cubic cell. Query results are sorted by
/// `(distance, index)`, so ties resolve deterministically.
#[derive(Debug, Clone, Default)]
pub struct SpatialGrid {
    cell: f64,
    cells: HashMap<Cell, Vec<usize>>,
    points: Vec<Point3>,
}

impl SpatialGrid {
    pub fn new(cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        Self {
            cell,
            cells: HashMap::new(),
            points: Vec::new(),
        }
    }

    pub fn from_points(cell: f64, points: impl IntoIterator<Item = Point3>) -> Self {
        let mut g = Self::new(cell);
        for p in points {
            g.insert(p);
        }
        g
    }

    fn key(&self, p: &Point3) -> Cell {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        )
    }

    /// Adds a point and returns its index.
    pub fn insert(&mut self, p: Point3) -> usize {
        let i = self.points.len();
        self.cells.entry(self.key(&p)).or_default().push(i);
        self.points.push(p);
        i
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Point3 {
        &self.points[i]
    }

    fn visit(&self, p: &Point3, radius: f64, mut f: impl FnMut(usize, f64)) {
        let r = (radius / self.cell).ceil() as i64;
        let (cx, cy, cz) = self.key(p);
        let r2 = radius * radius;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in ids {
                            let d2 = (self.points[i] - p).norm_squared();
                            if d2 <= r2 {
                                f(i, d2);
                            }
                        }
                    }
                }
            }
        }
    }

    /// `(index, squared distance)` of all points within `radius`.
    pub fn within(&self, p: &Point3, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        self.visit(p, radius, |i, d2| out.push((i, d2)));
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    pub fn any_within(&self, p: &Point3, radius: f64) -> bool {
        let mut found = false;
        self.visit(p, radius, |_, _| found = true);
        found
    }

    /// Up to `k` nearest points within `max_radius`. Searches shells of cells
    /// outward and stops once the k-th candidate is provably nearest.
    pub fn nearest(&self, p: &Point3, k: usize, max_radius: f64) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let (cx, cy, cz) = self.key(p);
        let r2 = max_radius * max_radius;
        let max_ring = (max_radius / self.cell).ceil() as i64 + 1;
        let mut out: Vec<(usize, f64)> = Vec::new();
        for ring in 0..=max_ring {
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &i in ids {
                                let d2 = (self.points[i] - p).norm_squared();
                                if d2 <= r2 {
                                    out.push((i, d2));
                                }
                            }
                        }
                    }
                }
            }
            // Unvisited cells are farther than `ring · cell` from p.
            let safe = ring as f64 * self.cell;
            if out.iter().filter(|(_, d2)| *d2 <= safe * safe).count() >= k {
                break;
            }
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out.truncate(k);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Point3> = (0..500)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let g = SpatialGrid::from_points(0.13, pts.iter().copied());
        for _ in 0..50 {
            let q = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let mut brute: Vec<(usize, f64)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm_squared()))
                .filter(|(_, d)| *d <= 0.3 * 0.3)
                .collect();
            brute.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            assert_eq!(g.within(&q, 0.3), brute);
            assert_eq!(g.nearest(&q, 4, 0.3), brute.iter().copied().take(4).collect::<Vec<_>>());
            assert_eq!(g.any_within(&q, 0.3), !brute.is_empty());
        }
    }
}
