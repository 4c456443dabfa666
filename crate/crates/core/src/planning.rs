//! Vantage points, collision-checked end-effector paths and visit ordering.
//!
//! Paths are planned in end-effector position space. Orientation is
//! interpolated along the path by arc length.

use std::fmt::Write as _;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Pose3;
use crate::mapping::{FlowerEstimate, OccupancyOctree};

/// Flowers farther than this from the arm base are not attempted.
pub const MAX_FLOWER_DISTANCE: f64 = 0.7;
pub const DEFAULT_STANDOFF: f64 = 0.15;

#[derive(Debug, Clone)]
pub struct VantagePoint {
    pub flower_id: usize,
    pub flower_position: Vector3<f64>,
    /// End-effector target: `standoff` out along the flower normal, tool +z
    /// pointing at the flower center, tool +y as close to world down as
    /// possible.
    pub pose: Pose3,
}

#[derive(Debug, Clone, Default)]
pub struct VantageSet {
    pub vantages: Vec<VantagePoint>,
    /// Ids of flowers dropped for being out of reach.
    pub unreachable: Vec<usize>,
}

pub fn generate_vantage_points(flowers: &[FlowerEstimate], standoff: f64, max_distance: f64) -> VantageSet {
    let mut out = VantageSet::default();
    for f in flowers {
        let p = f.pose.position;
        if p.norm() > max_distance {
            log::warn!("flower {} at {:.3} m is out of reach", f.id, p.norm());
            out.unreachable.push(f.id);
            continue;
        }
        let eye = p + f.normal() * standoff;
        out.vantages.push(VantagePoint {
            flower_id: f.id,
            flower_position: p,
            pose: Pose3::look_at(eye, p, -Vector3::z()),
        });
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct PlannerConfig {
    /// Maximum spacing of consecutive waypoints and the tree extension step.
    pub step: f64,
    pub max_samples: usize,
    pub goal_bias: f64,
    pub shortcut_passes: usize,
    /// Capsule radius swept by the end effector.
    pub clearance: f64,
    pub bounds_min: Vector3<f64>,
    pub bounds_max: Vector3<f64>,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            step: 0.02,
            max_samples: 5000,
            goal_bias: 0.1,
            shortcut_passes: 50,
            clearance: 0.02,
            bounds_min: Vector3::new(-0.3, -0.9, 0.0),
            bounds_max: Vector3::new(1.0, 0.9, 1.2),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathPolyline {
    pub waypoints: Vec<Pose3>,
    pub valid: bool,
}

impl PathPolyline {
    pub fn reversed(&self) -> Self {
        Self {
            waypoints: self.waypoints.iter().rev().copied().collect(),
            valid: self.valid,
        }
    }

    /// `index,x,y,z,qw,qx,qy,qz` per waypoint.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,x,y,z,qw,qx,qy,qz\n");
        for (i, w) in self.waypoints.iter().enumerate() {
            let [qw, qx, qy, qz] = w.wxyz();
            let _ = writeln!(
                s,
                "{i},{:.6},{:.6},{:.6},{qw:.6},{qx:.6},{qy:.6},{qz:.6}",
                w.position.x, w.position.y, w.position.z
            );
        }
        s
    }
}

pub fn path_cost(path: &PathPolyline) -> f64 {
    path.waypoints
        .windows(2)
        .map(|w| (w[1].position - w[0].position).norm())
        .sum()
}

fn segment_free(map: &OccupancyOctree, a: &Vector3<f64>, b: &Vector3<f64>, r: f64) -> bool {
    map.is_region_free(a, b, r)
}

/// Densifies a position polyline to `step` spacing and attaches orientations
/// slerped from `start` to `goal` by arc length.
fn densify(points: &[Vector3<f64>], start: &Pose3, goal: &Pose3, step: f64) -> Vec<Pose3> {
    let total: f64 = points.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let (qa, qb) = (start.orientation(), goal.orientation());
    let at = |p: Vector3<f64>, s: f64| {
        let t = if total > 0.0 { (s / total).clamp(0.0, 1.0) } else { 1.0 };
        Pose3::new(p, qa.slerp(&qb, t))
    };
    let mut out = vec![*start];
    let mut s = 0.0;
    for w in points.windows(2) {
        let d = w[1] - w[0];
        let len = d.norm();
        let n = ((len / step).ceil() as usize).max(1);
        for k in 1..=n {
            let f = k as f64 / n as f64;
            out.push(at(w[0] + d * f, s + len * f));
        }
        s += len;
    }
    let last = out.len() - 1;
    out[last] = *goal;
    out
}

/// Straight segment if it is collision-free, otherwise a bidirectional
/// goal-biased random tree in position space (fixed step, greedy connect)
/// followed by shortcut smoothing. `max_samples` bounds the number of random
/// samples drawn.
pub fn plan_point_to_point(
    start: &Pose3,
    goal: &Pose3,
    map: &OccupancyOctree,
    cfg: &PlannerConfig,
) -> Result<PathPolyline> {
    let (a, b) = (start.position, goal.position);
    if (a - b).norm() < 1e-12 {
        return Err(Error::DegeneratePlan("start and goal coincide".into()));
    }
    let r = cfg.clearance;
    if !segment_free(map, &b, &b, r) {
        return Err(Error::NoPath(0));
    }
    if segment_free(map, &a, &b, r) {
        return Ok(PathPolyline {
            waypoints: densify(&[a, b], start, goal, cfg.step),
            valid: true,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trees = [Tree::new(a), Tree::new(b)];
    let mut pts = None;
    for k in 0..cfg.max_samples {
        // alternate which tree grows toward the sample
        let (grow, other) = if k % 2 == 0 { (0, 1) } else { (1, 0) };
        let sample = if rng.random::<f64>() < cfg.goal_bias {
            trees[other].nodes[0].0
        } else {
            Vector3::from_fn(|i, _| rng.random_range(cfg.bounds_min[i]..cfg.bounds_max[i]))
        };
        let Some(new) = trees[grow].connect(&sample, map, cfg) else {
            continue;
        };
        let target = trees[grow].nodes[new].0;
        if let Some(meet) = trees[other].connect(&target, map, cfg) {
            if (trees[other].nodes[meet].0 - target).norm() < 1e-12 {
                let mut first = trees[grow].branch(new);
                let mut second = trees[other].branch(meet);
                if grow == 1 {
                    std::mem::swap(&mut first, &mut second);
                }
                first.reverse();
                first.extend(second.into_iter().skip(1));
                pts = Some(first);
                break;
            }
        }
    }
    let Some(mut pts) = pts else {
        return Err(Error::NoPath(cfg.max_samples));
    };

    for _ in 0..cfg.shortcut_passes {
        if pts.len() < 3 {
            break;
        }
        let i = rng.random_range(0..pts.len() - 2);
        let j = rng.random_range(i + 2..pts.len());
        if segment_free(map, &pts[i], &pts[j], r) {
            pts.drain(i + 1..j);
        }
    }
    Ok(PathPolyline {
        waypoints: densify(&pts, start, goal, cfg.step),
        valid: true,
    })
}

struct Tree {
    /// `(position, parent)`; the root's parent is `usize::MAX`.
    nodes: Vec<(Vector3<f64>, usize)>,
}

impl Tree {
    fn new(root: Vector3<f64>) -> Self {
        Self {
            nodes: vec![(root, usize::MAX)],
        }
    }

    fn nearest(&self, p: &Vector3<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = (n.0 - p).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Steps from the nearest node toward `target` until it is reached or
    /// blocked. Returns the last node added, if any.
    fn connect(&mut self, target: &Vector3<f64>, map: &OccupancyOctree, cfg: &PlannerConfig) -> Option<usize> {
        let mut cur = self.nearest(target);
        let mut added = None;
        loop {
            let from = self.nodes[cur].0;
            let d = target - from;
            let len = d.norm();
            if len < 1e-12 {
                return added.or(Some(cur));
            }
            let new = if len <= cfg.step { *target } else { from + d * (cfg.step / len) };
            if !segment_free(map, &from, &new, cfg.clearance) {
                return added;
            }
            self.nodes.push((new, cur));
            cur = self.nodes.len() - 1;
            added = Some(cur);
        }
    }

    /// Positions from node `i` back to the root.
    fn branch(&self, mut i: usize) -> Vec<Vector3<f64>> {
        let mut out = Vec::new();
        while i != usize::MAX {
            out.push(self.nodes[i].0);
            i = self.nodes[i].1;
        }
        out
    }
}

/// Pairwise leg costs; `f64::INFINITY` marks pairs with no path.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(pub DMatrix<f64>);

impl CostMatrix {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

#[derive(Debug, Clone)]
pub struct PlannedLegs {
    pub costs: CostMatrix,
    /// `paths[i][j]`, `None` on the diagonal and for failed pairs.
    pub paths: Vec<Vec<Option<PathPolyline>>>,
}

/// Plans every unordered pair once; the reverse leg reuses the reversed
/// polyline, so the matrix is symmetric.
pub fn build_cost_matrix(poses: &[Pose3], map: &OccupancyOctree, cfg: &PlannerConfig) -> PlannedLegs {
    let n = poses.len();
    let mut costs = DMatrix::zeros(n, n);
    let mut paths = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let leg_cfg = PlannerConfig {
                seed: cfg.seed ^ ((i as u64) << 32 | j as u64),
                ..*cfg
            };
            match plan_point_to_point(&poses[i], &poses[j], map, &leg_cfg) {
                Ok(p) => {
                    let c = path_cost(&p);
                    costs[(i, j)] = c;
                    costs[(j, i)] = c;
                    paths[j][i] = Some(p.reversed());
                    paths[i][j] = Some(p);
                }
                Err(e) => {
                    log::debug!("no leg {i} -> {j}: {e}");
                    costs[(i, j)] = f64::INFINITY;
                    costs[(j, i)] = f64::INFINITY;
                }
            }
        }
    }
    PlannedLegs {
        costs: CostMatrix(costs),
        paths,
    }
}

/// Drops vertices until every remaining pair has a finite cost, removing the
/// vertex with the most infinite entries first. `keep` is never dropped.
/// Returns the surviving indices in ascending order.
pub fn prune_unreachable(costs: &CostMatrix, keep: usize) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..costs.len()).collect();
    loop {
        let bad = |i: usize| alive.iter().filter(|&&j| !costs.get(i, j).is_finite()).count();
        let worst = alive
            .iter()
            .copied()
            .filter(|&i| i != keep)
            .map(|i| (i, bad(i)))
            .filter(|&(_, b)| b > 0)
            .max_by_key(|&(i, b)| (b, std::cmp::Reverse(i)));
        match worst {
            Some((i, _)) => alive.retain(|&j| j != i),
            None => return alive,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tour {
    pub order: Vec<usize>,
    pub cost: f64,
}

pub fn tour_cost(costs: &CostMatrix, order: &[usize]) -> f64 {
    order.windows(2).map(|w| costs.get(w[0], w[1])).sum()
}

pub const EXACT_TSP_LIMIT: usize = 12;

/// Open tour from `start` visiting every index once. Exact (Held-Karp) up to
/// [`EXACT_TSP_LIMIT`] vertices, nearest neighbor plus 2-opt beyond.
pub fn solve_tsp(costs: &CostMatrix, start: usize) -> Result<Tour> {
    let n = costs.len();
    if n == 0 {
        return Err(Error::DegeneratePlan("no vantage points".into()));
    }
    if start >= n {
        return Err(Error::DegeneratePlan(format!("start {start} out of {n}")));
    }
    if costs.0.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::DegeneratePlan("cost matrix has infinite or negative entries".into()));
    }
    let order = if n <= EXACT_TSP_LIMIT {
        held_karp(costs, start)
    } else {
        two_opt(costs, nearest_neighbor(costs, start))
    };
    Ok(Tour {
        cost: tour_cost(costs, &order),
        order,
    })
}

fn held_karp(costs: &CostMatrix, start: usize) -> Vec<usize> {
    let n = costs.len();
    let full = 1usize << n;
    let mut dp = vec![f64::INFINITY; full * n];
    let mut parent = vec![usize::MAX; full * n];
    dp[(1 << start) * n + start] = 0.0;
    for mask in 0..full {
        if mask & (1 << start) == 0 {
            continue;
        }
        for last in 0..n {
            let cur = dp[mask * n + last];
            if !cur.is_finite() {
                continue;
            }
            for next in 0..n {
                if mask & (1 << next) != 0 {
                    continue;
                }
                let m2 = mask | (1 << next);
                let c = cur + costs.get(last, next);
                if c < dp[m2 * n + next] {
                    dp[m2 * n + next] = c;
                    parent[m2 * n + next] = last;
                }
            }
        }
    }
    let mut last = (0..n)
        .min_by(|&a, &b| dp[(full - 1) * n + a].total_cmp(&dp[(full - 1) * n + b]))
        .expect("n > 0");
    let mut mask = full - 1;
    let mut order = vec![last];
    while mask != 1 << start {
        let p = parent[mask * n + last];
        mask &= !(1 << last);
        last = p;
        order.push(last);
    }
    order.reverse();
    order
}

pub fn nearest_neighbor(costs: &CostMatrix, start: usize) -> Vec<usize> {
    let n = costs.len();
    let mut seen = vec![false; n];
    let mut order = vec![start];
    seen[start] = true;
    for _ in 1..n {
        let last = *order.last().expect("non-empty");
        let next = (0..n)
            .filter(|&j| !seen[j])
            .min_by(|&a, &b| costs.get(last, a).total_cmp(&costs.get(last, b)))
            .expect("unvisited vertex");
        seen[next] = true;
        order.push(next);
    }
    order
}

/// Segment reversal on the open path, keeping the first vertex fixed.
/// Accepts only strict improvements, so the cost never increases.
pub fn two_opt(costs: &CostMatrix, mut order: Vec<usize>) -> Vec<usize> {
    let n = order.len();
    let mut best = tour_cost(costs, &order);
    let mut improved = true;
    while improved {
        improved = false;
        for i in 1..n.saturating_sub(1) {
            for j in i + 1..n {
                order[i..=j].reverse();
                let c = tour_cost(costs, &order);
                if c < best - 1e-12 {
                    best = c;
                    improved = true;
                } else {
                    order[i..=j].reverse();
                }
            }
        }
    }
    order
}

/// `leg,from,to,cost` with vertex labels taken from `labels`.
pub fn tour_csv(tour: &Tour, costs: &CostMatrix, labels: &[String]) -> String {
    let mut s = String::from("leg,from,to,cost\n");
    for (k, w) in tour.order.windows(2).enumerate() {
        let _ = writeln!(s, "{k},{},{},{:.6}", labels[w[0]], labels[w[1]], costs.get(w[0], w[1]));
    }
    s
}
