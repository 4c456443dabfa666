//! Log-odds occupancy octree.
//!
//! Leaves sit at `max_depth` and store clamped log-odds. Inner nodes store
//! the maximum of their children so a coarse query is conservative and a
//! collision query can skip any subtree whose maximum is below threshold.
//! Space that was never observed has no node and counts as free.

use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::geometry::{CameraIntrinsics, Pose3, RgbdImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OctreeConfig {
    /// Leaf edge length in meters.
    pub resolution: f64,
    pub max_depth: u32,
    /// Center of the cubic volume covered by the tree.
    pub center: Vector3<f64>,
    pub hit: f64,
    pub miss: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
    /// Occupancy probability above which a leaf counts as occupied.
    pub occupancy_threshold: f64,
}

impl Default for OctreeConfig {
    fn default() -> Self {
        Self {
            resolution: 0.01,
            max_depth: 8,
            center: Vector3::zeros(),
            hit: 0.85,
            miss: -0.4,
            clamp_min: -2.0,
            clamp_max: 3.5,
            occupancy_threshold: 0.5,
        }
    }
}

pub fn logodds(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn probability(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

/// Integer leaf coordinates.
pub type LeafKey = [u32; 3];

const NO_CHILDREN: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Node {
    /// Index of the first of eight consecutive children, or `NO_CHILDREN`.
    children: u32,
    /// Leaf: log-odds. Inner: max over observed descendants.
    value: f32,
    observed: bool,
}

impl Node {
    fn empty() -> Self {
        Self {
            children: NO_CHILDREN,
            value: f32::NEG_INFINITY,
            observed: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OccupancyOctree {
    cfg: OctreeConfig,
    nodes: Vec<Node>,
}

/// One exported leaf: center, edge length, log-odds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafRecord {
    pub center: Vector3<f64>,
    pub size: f64,
    pub log_odds: f64,
}

impl OccupancyOctree {
    pub fn new(cfg: OctreeConfig) -> Self {
        assert!(cfg.resolution > 0.0 && cfg.max_depth >= 1 && cfg.max_depth <= 20);
        assert!(cfg.clamp_min < 0.0 && cfg.clamp_max > 0.0);
        Self {
            cfg,
            nodes: vec![Node::empty()],
        }
    }

    pub fn config(&self) -> &OctreeConfig {
        &self.cfg
    }

    pub fn resolution(&self) -> f64 {
        self.cfg.resolution
    }

    fn cells_per_axis(&self) -> u32 {
        1 << self.cfg.max_depth
    }

    /// Edge length of the whole volume.
    pub fn extent(&self) -> f64 {
        self.cfg.resolution * self.cells_per_axis() as f64
    }

    pub fn min_corner(&self) -> Vector3<f64> {
        self.cfg.center - Vector3::repeat(self.extent() / 2.0)
    }

    fn threshold_logodds(&self) -> f64 {
        logodds(self.cfg.occupancy_threshold)
    }

    pub fn key(&self, p: &Vector3<f64>) -> Option<LeafKey> {
        let rel = (p - self.min_corner()) / self.cfg.resolution;
        let n = self.cells_per_axis() as f64;
        if rel.iter().any(|&c| !(c >= 0.0 && c < n)) {
            return None;
        }
        Some([rel.x as u32, rel.y as u32, rel.z as u32])
    }

    pub fn key_center(&self, k: LeafKey) -> Vector3<f64> {
        self.min_corner()
            + Vector3::new(k[0] as f64 + 0.5, k[1] as f64 + 0.5, k[2] as f64 + 0.5) * self.cfg.resolution
    }

    fn child_slot(k: LeafKey, level_bit: u32) -> usize {
        (((k[0] >> level_bit) & 1) | (((k[1] >> level_bit) & 1) << 1) | (((k[2] >> level_bit) & 1) << 2))
            as usize
    }

    /// Adds `delta` to a leaf, clamping, and refreshes the ancestors.
    pub fn update_leaf(&mut self, k: LeafKey, delta: f64) {
        let mut path = Vec::with_capacity(self.cfg.max_depth as usize + 1);
        let mut idx = 0usize;
        path.push(idx);
        for level in (0..self.cfg.max_depth).rev() {
            if self.nodes[idx].children == NO_CHILDREN {
                let first = self.nodes.len() as u32;
                self.nodes.extend(std::iter::repeat_n(Node::empty(), 8));
                self.nodes[idx].children = first;
            }
            idx = self.nodes[idx].children as usize + Self::child_slot(k, level);
            path.push(idx);
        }
        let leaf = &mut self.nodes[idx];
        let current = if leaf.observed { leaf.value as f64 } else { 0.0 };
        leaf.value = (current + delta).clamp(self.cfg.clamp_min, self.cfg.clamp_max) as f32;
        leaf.observed = true;
        for &inner in path.iter().rev().skip(1) {
            let first = self.nodes[inner].children as usize;
            let max = self.nodes[first..first + 8]
                .iter()
                .filter(|c| c.observed)
                .map(|c| c.value)
                .fold(f32::NEG_INFINITY, f32::max);
            self.nodes[inner].value = max;
            self.nodes[inner].observed = true;
        }
    }

    /// Log-odds of the node containing `p` at `depth` (0 = root,
    /// `max_depth` = leaf). Inner nodes report the max over their observed
    /// leaves. `None` for unobserved or out-of-volume space.
    pub fn log_odds_at(&self, p: &Vector3<f64>, depth: u32) -> Option<f64> {
        let k = self.key(p)?;
        let mut idx = 0usize;
        for level in (0..self.cfg.max_depth).rev().take(depth.min(self.cfg.max_depth) as usize) {
            let node = self.nodes[idx];
            if node.children == NO_CHILDREN {
                return None;
            }
            idx = node.children as usize + Self::child_slot(k, level);
        }
        let node = self.nodes[idx];
        node.observed.then_some(node.value as f64)
    }

    pub fn leaf_log_odds(&self, k: LeafKey) -> Option<f64> {
        self.log_odds_at(&self.key_center(k), self.cfg.max_depth)
    }

    pub fn occupancy_at(&self, p: &Vector3<f64>, depth: u32) -> Option<f64> {
        self.log_odds_at(p, depth).map(probability)
    }

    pub fn is_occupied(&self, p: &Vector3<f64>) -> bool {
        self.log_odds_at(p, self.cfg.max_depth)
            .is_some_and(|l| l > self.threshold_logodds())
    }

    /// Leaves crossed by the segment `from -> to`, in order, via a 3-D
    /// integer grid walk. Includes the cells containing both endpoints.
    pub fn ray_keys(&self, from: &Vector3<f64>, to: &Vector3<f64>) -> Vec<LeafKey> {
        let res = self.cfg.resolution;
        let n = self.cells_per_axis() as i64;
        let min = self.min_corner();
        let a = (from - min) / res;
        let b = (to - min) / res;
        let dir = b - a;
        let mut cell = [a.x.floor() as i64, a.y.floor() as i64, a.z.floor() as i64];
        let end = [b.x.floor() as i64, b.y.floor() as i64, b.z.floor() as i64];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for i in 0..3 {
            if dir[i] > 0.0 {
                step[i] = 1;
                t_max[i] = ((cell[i] + 1) as f64 - a[i]) / dir[i];
                t_delta[i] = 1.0 / dir[i];
            } else if dir[i] < 0.0 {
                step[i] = -1;
                t_max[i] = (a[i] - cell[i] as f64) / -dir[i];
                t_delta[i] = -1.0 / dir[i];
            }
        }
        let max_steps = (end[0] - cell[0]).abs() + (end[1] - cell[1]).abs() + (end[2] - cell[2]).abs();
        let mut keys = Vec::with_capacity(max_steps as usize + 1);
        let inside = |c: &[i64; 3]| c.iter().all(|&v| v >= 0 && v < n);
        for _ in 0..=max_steps {
            if inside(&cell) {
                keys.push([cell[0] as u32, cell[1] as u32, cell[2] as u32]);
            }
            if cell == end {
                break;
            }
            let axis = if t_max[0] < t_max[1] {
                if t_max[0] < t_max[2] { 0 } else { 2 }
            } else if t_max[1] < t_max[2] {
                1
            } else {
                2
            };
            if t_max[axis] > 1.0 {
                break;
            }
            cell[axis] += step[axis];
            t_max[axis] += t_delta[axis];
        }
        keys
    }

    /// Integrates a batch of rays from `origin`. Each leaf is updated at
    /// most once per batch; a leaf that is both an endpoint and traversed
    /// counts as a hit. Rays longer than `max_range` only clear space up to
    /// `max_range`.
    pub fn insert_rays(&mut self, origin: &Vector3<f64>, endpoints: &[Vector3<f64>], max_range: f64) {
        let mut free: Vec<u64> = Vec::new();
        let mut hits: Vec<u64> = Vec::new();
        for e in endpoints {
            let d = e - origin;
            let len = d.norm();
            if len <= 0.0 {
                continue;
            }
            let (stop, is_hit) = if len > max_range {
                (origin + d * (max_range / len), false)
            } else {
                (*e, true)
            };
            let keys = self.ray_keys(origin, &stop);
            let end_key = self.key(&stop);
            for k in keys {
                if is_hit && Some(k) == end_key {
                    continue;
                }
                free.push(pack(k));
            }
            if is_hit {
                if let Some(k) = end_key {
                    hits.push(pack(k));
                }
            }
        }
        hits.sort_unstable();
        hits.dedup();
        free.sort_unstable();
        free.dedup();
        let (hit, miss) = (self.cfg.hit, self.cfg.miss);
        for &k in &free {
            if hits.binary_search(&k).is_err() {
                self.update_leaf(unpack(k), miss);
            }
        }
        for &k in &hits {
            self.update_leaf(unpack(k), hit);
        }
    }

    /// Integrates one depth frame taken from `sensor_pose` (camera frame
    /// conventions). Invalid depths are skipped.
    pub fn insert_depth_scan(
        &mut self,
        sensor_pose: &Pose3,
        image: &RgbdImage,
        k: &CameraIntrinsics,
        max_range: f64,
    ) {
        let mut endpoints = Vec::new();
        for v in 0..image.height() {
            for u in 0..image.width() {
                let z = image.depth_at(u, v);
                if !(z > 0.0) {
                    continue;
                }
                let p = Vector3::new((u as f64 - k.cx) * z / k.fx, (v as f64 - k.cy) * z / k.fy, z);
                endpoints.push(sensor_pose.transform_point(&p));
            }
        }
        self.insert_rays(&sensor_pose.position, &endpoints, max_range);
    }

    /// True iff no occupied leaf intersects the capsule of `radius` around
    /// the segment. Unobserved space is free.
    pub fn is_region_free(&self, start: &Vector3<f64>, end: &Vector3<f64>, radius: f64) -> bool {
        let thresh = self.threshold_logodds() as f32;
        let mut stack = vec![(0usize, self.min_corner(), self.extent())];
        while let Some((idx, corner, size)) = stack.pop() {
            let node = self.nodes[idx];
            if !node.observed || node.value <= thresh {
                continue;
            }
            // Bounding-sphere test first; the exact distance is costlier.
            let center = corner + Vector3::repeat(size / 2.0);
            if point_segment_distance(&center, start, end) - size * 3f64.sqrt() / 2.0 > radius
                || segment_box_distance(start, end, &corner, size) > radius
            {
                continue;
            }
            if node.children == NO_CHILDREN {
                // Only leaves carry values of their own.
                return false;
            }
            let half = size / 2.0;
            for slot in 0..8 {
                let off = Vector3::new(
                    (slot & 1) as f64 * half,
                    ((slot >> 1) & 1) as f64 * half,
                    ((slot >> 2) & 1) as f64 * half,
                );
                stack.push((node.children as usize + slot, corner + off, half));
            }
        }
        true
    }

    /// Observed leaves in depth-first child order.
    pub fn leaves(&self) -> Vec<LeafRecord> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, self.min_corner(), self.extent())];
        while let Some((idx, corner, size)) = stack.pop() {
            let node = self.nodes[idx];
            if !node.observed {
                continue;
            }
            if node.children == NO_CHILDREN {
                out.push(LeafRecord {
                    center: corner + Vector3::repeat(size / 2.0),
                    size,
                    log_odds: node.value as f64,
                });
                continue;
            }
            let half = size / 2.0;
            for slot in (0..8).rev() {
                let off = Vector3::new(
                    (slot & 1) as f64 * half,
                    ((slot >> 1) & 1) as f64 * half,
                    ((slot >> 2) & 1) as f64 * half,
                );
                stack.push((node.children as usize + slot, corner + off, half));
            }
        }
        out
    }

    pub fn occupied_leaves(&self) -> Vec<LeafRecord> {
        let t = self.threshold_logodds();
        self.leaves().into_iter().filter(|l| l.log_odds > t).collect()
    }

    /// One leaf per line: `x y z size log_odds`.
    pub fn export_text(&self) -> String {
        let mut s = String::new();
        for l in self.leaves() {
            let _ = writeln!(
                s,
                "{:.4} {:.4} {:.4} {:.4} {:.4}",
                l.center.x, l.center.y, l.center.z, l.size, l.log_odds
            );
        }
        s
    }
}

fn pack(k: LeafKey) -> u64 {
    ((k[0] as u64) << 42) | ((k[1] as u64) << 21) | k[2] as u64
}

fn unpack(v: u64) -> LeafKey {
    [(v >> 42) as u32 & 0x1f_ffff, (v >> 21) as u32 & 0x1f_ffff, v as u32 & 0x1f_ffff]
}

pub fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (a + d * t - p).norm()
}

fn point_box_distance(p: &Vector3<f64>, corner: &Vector3<f64>, size: f64) -> f64 {
    let mut d2 = 0.0;
    for i in 0..3 {
        let lo = corner[i];
        let hi = corner[i] + size;
        let e = if p[i] < lo {
            lo - p[i]
        } else if p[i] > hi {
            p[i] - hi
        } else {
            0.0
        };
        d2 += e * e;
    }
    d2.sqrt()
}

/// Distance between a segment and an axis-aligned cube. The distance from a
/// point to a convex set is convex along the segment, so a golden-section
/// search converges to the minimum.
pub fn segment_box_distance(a: &Vector3<f64>, b: &Vector3<f64>, corner: &Vector3<f64>, size: f64) -> f64 {
    let d = b - a;
    let f = |t: f64| point_box_distance(&(a + d * t), corner, size);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    f(0.0).min(f(1.0)).min(f1).min(f2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tree() -> OccupancyOctree {
        OccupancyOctree::new(OctreeConfig::default())
    }

    #[test]
    fn single_ray_geometry() {
        let mut t = tree();
        let o = Vector3::new(0.005, 0.005, 0.005);
        let e = Vector3::new(0.505, 0.005, 0.005);
        t.insert_rays(&o, &[e], 2.0);
        let end = t.key(&e).unwrap();
        assert!((t.leaf_log_odds(end).unwrap() - 0.85).abs() < 1e-6);
        let free: Vec<_> = t.leaves().into_iter().filter(|l| l.log_odds < 0.0).collect();
        assert_eq!(free.len(), 50);
        assert!(free.iter().all(|l| (l.log_odds + 0.4).abs() < 1e-6));
    }

    #[test]
    fn repeated_hits_clamp() {
        let mut t = tree();
        let o = Vector3::new(0.005, 0.005, 0.005);
        let e = Vector3::new(0.505, 0.005, 0.005);
        for _ in 0..10 {
            t.insert_rays(&o, &[e], 2.0);
        }
        let v = t.leaf_log_odds(t.key(&e).unwrap()).unwrap();
        assert!((v - (10.0f64 * 0.85).min(3.5)).abs() < 1e-6);
        let mid = t.leaf_log_odds(t.key(&Vector3::new(0.2, 0.005, 0.005)).unwrap()).unwrap();
        assert!((mid + 2.0).abs() < 1e-6);
    }

    #[test]
    fn long_rays_only_clear_to_max_range() {
        let mut t = tree();
        let o = Vector3::new(0.005, 0.005, 0.005);
        let e = Vector3::new(1.005, 0.005, 0.005);
        t.insert_rays(&o, &[e], 0.3);
        assert!(t.leaves().iter().all(|l| l.log_odds < 0.0));
        assert!(t.log_odds_at(&Vector3::new(0.5, 0.005, 0.005), 8).is_none());
        assert!(t.log_odds_at(&Vector3::new(0.25, 0.005, 0.005), 8).is_some());
    }

    #[test]
    fn coarse_query_reports_max_child() {
        let mut t = tree();
        let k = t.key(&Vector3::new(0.1, 0.1, 0.1)).unwrap();
        t.update_leaf(k, 0.85);
        let mut k2 = k;
        k2[0] ^= 1;
        t.update_leaf(k2, -0.4);
        let p = t.key_center(k);
        for depth in 0..8 {
            assert!((t.log_odds_at(&p, depth).unwrap() - 0.85).abs() < 1e-6);
        }
        assert!((t.log_odds_at(&t.key_center(k2), 8).unwrap() + 0.4).abs() < 1e-6);
    }

    #[test]
    fn ray_walk_visits_face_adjacent_cells() {
        let t = tree();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let a = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let b = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let keys = t.ray_keys(&a, &b);
            assert_eq!(keys.first(), t.key(&a).as_ref());
            assert_eq!(keys.last(), t.key(&b).as_ref());
            for w in keys.windows(2) {
                let d: u32 = (0..3).map(|i| w[0][i].abs_diff(w[1][i])).sum();
                assert_eq!(d, 1);
            }
            // Every sample along the segment lies in a visited cell.
            for i in 0..=100 {
                let p = a + (b - a) * (i as f64 / 100.0);
                assert!(keys.contains(&t.key(&p).unwrap()));
            }
        }
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let o = Vector3::new(0.0, 0.0, 0.0);
        let rays = [
            Vector3::new(0.4, 0.3, 0.01),
            Vector3::new(-0.3, 0.45, 0.2),
            Vector3::new(0.1, -0.5, -0.3),
        ];
        let mut a = tree();
        for r in &rays {
            a.insert_rays(&o, &[*r], 2.0);
        }
        let mut b = tree();
        for r in rays.iter().rev() {
            b.insert_rays(&o, &[*r], 2.0);
        }
        assert_eq!(a.leaves(), {
            let mut l = b.leaves();
            l.sort_by(|x, y| x.center.as_slice().partial_cmp(y.center.as_slice()).unwrap());
            let mut la = a.leaves();
            la.sort_by(|x, y| x.center.as_slice().partial_cmp(y.center.as_slice()).unwrap());
            assert_eq!(la, l);
            a.leaves()
        });
    }

    #[test]
    fn region_queries() {
        let mut t = tree();
        assert!(t.is_region_free(&Vector3::new(-0.5, 0.0, 0.0), &Vector3::new(0.5, 0.2, 0.1), 0.05));
        // Wall of occupied cells in the plane x = 0.3.
        for iy in -10..10 {
            for iz in -10..10 {
                let k = t.key(&Vector3::new(0.305, iy as f64 * 0.01 + 0.005, iz as f64 * 0.01 + 0.005)).unwrap();
                t.update_leaf(k, 0.85);
            }
        }
        assert!(!t.is_region_free(&Vector3::new(0.0, 0.0, 0.0), &Vector3::new(0.6, 0.0, 0.0), 0.005));
        let diag = 0.01 * 3f64.sqrt();
        let clear = 0.02 + diag + 1e-3;
        assert!(t.is_region_free(
            &Vector3::new(0.31 - clear - 0.005, -0.05, 0.0),
            &Vector3::new(0.31 - clear - 0.005, 0.05, 0.0),
            0.02
        ));
        // Beside the wall, passing just outside its y extent.
        assert!(t.is_region_free(&Vector3::new(0.0, 0.15, 0.0), &Vector3::new(0.6, 0.15, 0.0), 0.02));
    }

    #[test]
    fn adding_occupancy_never_frees_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = tree();
        let segs: Vec<_> = (0..30)
            .map(|_| {
                (
                    Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
                    Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
                )
            })
            .collect();
        let mut prev: Vec<bool> = segs.iter().map(|(a, b)| t.is_region_free(a, b, 0.01)).collect();
        for _ in 0..40 {
            let p = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            t.update_leaf(t.key(&p).unwrap(), 0.85);
            let now: Vec<bool> = segs.iter().map(|(a, b)| t.is_region_free(a, b, 0.01)).collect();
            for (was, is) in prev.iter().zip(&now) {
                assert!(*was || !*is, "occupied region became free");
            }
            prev = now;
        }
    }

    #[test]
    fn segment_box_distance_matches_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let a = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let b = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let corner = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let size = rng.random_range(0.01..0.4);
            let brute = (0..=20_000)
                .map(|i| point_box_distance(&(a + (b - a) * (i as f64 / 20_000.0)), &corner, size))
                .fold(f64::INFINITY, f64::min);
            let d = segment_box_distance(&a, &b, &corner, size);
            assert!(d <= brute + 1e-9 && brute - d < 2e-4, "{d} vs {brute}");
        }
    }

    #[test]
    fn export_lines() {
        let mut t = tree();
        t.update_leaf(t.key(&Vector3::new(0.015, 0.025, 0.035)).unwrap(), 0.85);
        let text = t.export_text();
        assert_eq!(text.trim(), "0.0150 0.0250 0.0350 0.0100 0.8500");
    }

    #[test]
    fn key_packing_round_trips() {
        for k in [[0, 0, 0], [255, 1, 77], [(1 << 20) - 1, 5, (1 << 20) + 3]] {
            assert_eq!(unpack(pack(k)), k);
        }
    }
}
