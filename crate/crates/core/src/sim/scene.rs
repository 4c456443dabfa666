//! Synthetic plant scenes: flowers, leaves, canes and pale glints.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{OrientationClass, DEFAULT_ORIENTATION_YAW};
use crate::error::{Error, Result};
use crate::mapping::flower_normal;
use crate::planning::MAX_FLOWER_DISTANCE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SurfaceClass {
    Petal,
    Anther,
    Leaf,
    Cane,
    Glint,
    Background,
}

/// Per-channel Gaussian color distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorStats {
    pub mean: [f64; 3],
    pub sigma: [f64; 3],
}

impl ColorStats {
    pub const fn new(mean: [f64; 3], sigma: f64) -> Self {
        Self {
            mean,
            sigma: [sigma; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassColors {
    pub petal: ColorStats,
    pub anther: ColorStats,
    pub leaf: ColorStats,
    pub cane: ColorStats,
    pub glint: ColorStats,
    pub background: ColorStats,
}

impl Default for ClassColors {
    fn default() -> Self {
        Self {
            petal: ColorStats::new([235.0, 235.0, 225.0], 6.0),
            anther: ColorStats::new([225.0, 200.0, 60.0], 8.0),
            leaf: ColorStats::new([60.0, 130.0, 50.0], 10.0),
            cane: ColorStats::new([110.0, 60.0, 50.0], 8.0),
            glint: ColorStats::new([200.0, 210.0, 215.0], 6.0),
            background: ColorStats::new([90.0, 100.0, 80.0], 10.0),
        }
    }
}

impl ClassColors {
    pub fn get(&self, class: SurfaceClass) -> &ColorStats {
        match class {
            SurfaceClass::Petal => &self.petal,
            SurfaceClass::Anther => &self.anther,
            SurfaceClass::Leaf => &self.leaf,
            SurfaceClass::Cane => &self.cane,
            SurfaceClass::Glint => &self.glint,
            SurfaceClass::Background => &self.background,
        }
    }
}

/// A flower: a petal disc with a raised anther cylinder on its face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flower {
    /// Petal disc center.
    pub position: Vector3<f64>,
    /// Unit face normal.
    pub normal: Vector3<f64>,
    pub petal_radius: f64,
    pub anther_radius: f64,
    /// Height of the anther top above the petal plane.
    pub anther_height: f64,
    /// Yaw of the normal away from the base-facing direction.
    pub yaw: f64,
}

impl Flower {
    pub fn anther_top(&self) -> Vector3<f64> {
        self.position + self.normal * self.anther_height
    }

    pub fn class(&self, theta: f64) -> OrientationClass {
        OrientationClass::nearest(self.yaw, theta)
    }

    pub fn distance_from_base(&self) -> f64 {
        self.position.norm()
    }
}

/// Flat elliptical leaf.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leaf {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// Unit vector in the leaf plane along the major semi-axis.
    pub major_axis: Vector3<f64>,
    pub semi_major: f64,
    pub semi_minor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cane {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub radius: f64,
}

/// Small specular highlight that looks pale, like a petal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Glint {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub flowers: Vec<Flower>,
    pub leaves: Vec<Leaf>,
    pub canes: Vec<Cane>,
    pub glints: Vec<Glint>,
    pub colors: ClassColors,
    pub seed: u64,
}

/// Axis-aligned box every scene primitive must lie in.
pub const WORKSPACE_MIN: [f64; 3] = [-0.25, -0.75, 0.0];
pub const WORKSPACE_MAX: [f64; 3] = [1.25, 0.75, 1.5];

fn inside_workspace(p: &Vector3<f64>) -> bool {
    (0..3).all(|i| p[i] >= WORKSPACE_MIN[i] && p[i] <= WORKSPACE_MAX[i])
}

impl SceneSpec {
    pub fn empty(seed: u64) -> Self {
        Self {
            flowers: Vec::new(),
            leaves: Vec::new(),
            canes: Vec::new(),
            glints: Vec::new(),
            colors: ClassColors::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.flowers.iter().enumerate() {
            if !(f.anther_radius > 0.0 && f.anther_radius < f.petal_radius) {
                return Err(Error::Config(format!("flower {i}: anther radius must be below petal radius")));
            }
            if !inside_workspace(&f.position) || !inside_workspace(&f.anther_top()) {
                return Err(Error::Config(format!("flower {i} outside the workspace box")));
            }
        }
        let leaves = self.leaves.iter().map(|l| l.center);
        let canes = self.canes.iter().flat_map(|c| [c.start, c.end]);
        let glints = self.glints.iter().map(|g| g.center);
        if !leaves.chain(canes).chain(glints).all(|p| inside_workspace(&p)) {
            return Err(Error::Config("scene geometry outside the workspace box".into()));
        }
        Ok(())
    }

    /// Indices of flowers within arm reach.
    pub fn reachable(&self) -> Vec<usize> {
        (0..self.flowers.len())
            .filter(|&i| self.flowers[i].distance_from_base() <= MAX_FLOWER_DISTANCE)
            .collect()
    }
}

/// Layout recipe for one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioTemplate {
    pub id: usize,
    pub reachable: usize,
    /// Flowers placed beyond arm reach.
    pub unreachable: usize,
    pub leaves: usize,
    pub canes: usize,
    pub glints: usize,
}

impl ScenarioTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.glints > self.leaves {
            return Err(Error::Config(format!("scenario {}: glints sit on leaves, at most one each", self.id)));
        }
        if self.reachable + self.unreachable > 8 {
            return Err(Error::Config(format!("scenario {}: at most 8 flowers", self.id)));
        }
        Ok(())
    }
}

/// The eight standard scenarios.
pub fn scenario_templates() -> Vec<ScenarioTemplate> {
    let reachable = [3, 3, 2, 2, 2, 4, 4, 4];
    let unreachable = [0, 1, 0, 1, 1, 0, 1, 0];
    let leaves = [6, 8, 6, 10, 8, 8, 10, 12];
    let canes = [2, 2, 3, 2, 3, 3, 2, 3];
    let glints = [1, 2, 1, 2, 2, 1, 2, 2];
    (0..8)
        .map(|i| ScenarioTemplate {
            id: i + 1,
            reachable: reachable[i],
            unreachable: unreachable[i],
            leaves: leaves[i],
            canes: canes[i],
            glints: glints[i],
        })
        .collect()
}

pub fn scenario_template(id: usize) -> Result<ScenarioTemplate> {
    scenario_templates()
        .into_iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::Config(format!("unknown scenario {id}; expected 1..=8")))
}

/// Approach corridor kept clear in front of every flower, meters.
const CORRIDOR_LENGTH: f64 = 0.22;
const CORRIDOR_RADIUS: f64 = 0.045;
const MIN_FLOWER_SPACING: f64 = 0.09;
const MAX_TRIES: usize = 2000;
/// Reachable flowers closer than this to the base axis can face the base
/// with their vantage point inside the shoulder's dead zone.
const MIN_REACH_HORIZONTAL: f64 = 0.36;

fn unit_from_angles(azimuth: f64, elevation: f64) -> Vector3<f64> {
    Vector3::new(
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    )
}

/// Any unit vector perpendicular to `n`.
pub(crate) fn perpendicular(n: &Vector3<f64>) -> Vector3<f64> {
    let a = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    n.cross(&a).normalize()
}

fn sample_flower(rng: &mut ChaCha8Rng, reachable: bool) -> Flower {
    let theta = DEFAULT_ORIENTATION_YAW;
    let z: f64 = rng.random_range(0.28..0.5);
    let (r, az) = if reachable {
        // keep the flower well out from under the shoulder
        let lower = (z + 0.12).max(0.42).max(MIN_REACH_HORIZONTAL.hypot(z));
        (rng.random_range(lower..0.62), rng.random_range(-0.35..0.35))
    } else {
        (rng.random_range(0.76..0.85), rng.random_range(-0.3..0.3))
    };
    let h = (r * r - z * z).sqrt();
    let position = Vector3::new(h * f64::cos(az), h * f64::sin(az), z);
    let class = OrientationClass::from_index(rng.random_range(0..3));
    let yaw = class.yaw(theta) + rng.random_range(-5f64..5.0).to_radians();
    let tilt = rng.random_range(-8f64..8.0).to_radians();
    let horizontal = flower_normal(&position, yaw);
    let side = Unit::new_normalize(horizontal.cross(&Vector3::z()));
    let normal = Rotation3::from_axis_angle(&side, tilt) * horizontal;
    Flower {
        position,
        normal,
        petal_radius: rng.random_range(0.016..0.02),
        anther_radius: rng.random_range(0.0055..0.0065),
        anther_height: rng.random_range(0.012..0.015),
        yaw,
    }
}

fn segment_distance(p0: &Vector3<f64>, p1: &Vector3<f64>, q0: &Vector3<f64>, q1: &Vector3<f64>) -> f64 {
    // sampled; segments here are short compared with the tolerances used
    let mut best = f64::INFINITY;
    for i in 0..=20 {
        let p = p0 + (p1 - p0) * (i as f64 / 20.0);
        best = best.min(crate::mapping::octree::point_segment_distance(&p, q0, q1));
    }
    best
}

fn corridor(f: &Flower) -> (Vector3<f64>, Vector3<f64>) {
    (f.position, f.position + f.normal * CORRIDOR_LENGTH)
}

/// Deterministic scene for a template and seed.
pub fn generate_scene(template: &ScenarioTemplate, seed: u64) -> Result<SceneSpec> {
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = SceneSpec::empty(seed);

    for reachable in std::iter::repeat_n(true, template.reachable).chain(std::iter::repeat_n(false, template.unreachable)) {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let f = sample_flower(&mut rng, reachable);
            let (a0, a1) = corridor(&f);
            let clear = scene.flowers.iter().all(|g| {
                let (b0, b1) = corridor(g);
                (g.position - f.position).norm() > MIN_FLOWER_SPACING
                    && segment_distance(&a0, &a1, &g.position, &g.position) > CORRIDOR_RADIUS + g.petal_radius
                    && segment_distance(&b0, &b1, &f.position, &f.position) > CORRIDOR_RADIUS + f.petal_radius
            });
            if clear {
                scene.flowers.push(f);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!("scenario {}: could not place all flowers", template.id)));
        }
    }

    let keeps_corridors_clear = |scene: &SceneSpec, p0: &Vector3<f64>, p1: &Vector3<f64>, r: f64| {
        scene.flowers.iter().all(|f| {
            let (c0, c1) = corridor(f);
            segment_distance(p0, p1, &c0, &c1) > CORRIDOR_RADIUS + r
        })
    };

    for _ in 0..template.leaves {
        for _ in 0..MAX_TRIES {
            let center = Vector3::new(
                rng.random_range(0.35..0.85),
                rng.random_range(-0.38..0.38),
                rng.random_range(0.18..0.62),
            );
            let toward_base = f64::atan2(-center.y, -center.x);
            let normal = unit_from_angles(
                toward_base + rng.random_range(-1.0..1.0),
                rng.random_range(-0.6..0.6),
            );
            let u = perpendicular(&normal);
            let spin = rng.random_range(0.0..std::f64::consts::PI);
            let major_axis = Rotation3::from_axis_angle(&Unit::new_normalize(normal), spin) * u;
            let leaf = Leaf {
                center,
                normal,
                major_axis,
                semi_major: rng.random_range(0.03..0.06),
                semi_minor: rng.random_range(0.015..0.03),
            };
            let a = leaf.center - leaf.major_axis * leaf.semi_major;
            let b = leaf.center + leaf.major_axis * leaf.semi_major;
            if keeps_corridors_clear(&scene, &a, &b, leaf.semi_minor) {
                scene.leaves.push(leaf);
                break;
            }
        }
    }

    for _ in 0..template.canes {
        for _ in 0..MAX_TRIES {
            let start = Vector3::new(rng.random_range(0.5..0.9), rng.random_range(-0.35..0.35), 0.05);
            let end = start
                + Vector3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.15..0.15),
                    rng.random_range(0.55..0.75),
                );
            let radius = rng.random_range(0.006..0.01);
            if keeps_corridors_clear(&scene, &start, &end, radius) {
                scene.canes.push(Cane { start, end, radius });
                break;
            }
        }
    }

    let leaves = scene.leaves.clone();
    for leaf in leaves.iter().take(template.glints) {
        let v = leaf.normal.cross(&leaf.major_axis);
        let offset = leaf.major_axis * (leaf.semi_major * rng.random_range(-0.4..0.4))
            + v * (leaf.semi_minor * rng.random_range(-0.3..0.3));
        scene.glints.push(Glint {
            center: leaf.center + offset + leaf.normal * 0.002,
            normal: leaf.normal,
            radius: rng.random_range(0.008..0.012),
        });
    }

    scene.validate()?;
    Ok(scene)
}
