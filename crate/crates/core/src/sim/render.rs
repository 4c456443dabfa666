//! Z-buffered ray casting of scene primitives into an RGB-D frame.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::{CameraIntrinsics, Pose3, RgbdImage};

use super::noise::NoiseSpec;
use super::scene::{perpendicular, SceneSpec, SurfaceClass};

/// What each pixel of a render shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelTag {
    Background,
    /// Petal or anther of the flower with this index.
    Flower(usize),
    Leaf,
    Cane,
    Glint,
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: RgbdImage,
    pub tags: Vec<PixelTag>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Planar ellipse; a disc has equal semi-axes.
    Ellipse {
        center: Vector3<f64>,
        normal: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
        a: f64,
        b: f64,
    },
    /// Open cylinder between two points.
    Cylinder {
        p0: Vector3<f64>,
        axis: Vector3<f64>,
        length: f64,
        radius: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct Primitive {
    shape: Shape,
    class: SurfaceClass,
    tag: PixelTag,
}

fn disc(center: Vector3<f64>, normal: Vector3<f64>, r: f64) -> Shape {
    let u = perpendicular(&normal);
    Shape::Ellipse {
        center,
        normal,
        u,
        v: normal.cross(&u),
        a: r,
        b: r,
    }
}

fn cylinder(p0: Vector3<f64>, p1: Vector3<f64>, radius: f64) -> Shape {
    let d = p1 - p0;
    Shape::Cylinder {
        p0,
        axis: d.normalize(),
        length: d.norm(),
        radius,
    }
}

impl Shape {
    fn to_camera(self, world_to_cam: &Pose3) -> Self {
        match self {
            Shape::Ellipse { center, normal, u, v, a, b } => Shape::Ellipse {
                center: world_to_cam.transform_point(&center),
                normal: world_to_cam.rotate(&normal),
                u: world_to_cam.rotate(&u),
                v: world_to_cam.rotate(&v),
                a,
                b,
            },
            Shape::Cylinder { p0, axis, length, radius } => Shape::Cylinder {
                p0: world_to_cam.transform_point(&p0),
                axis: world_to_cam.rotate(&axis),
                length,
                radius,
            },
        }
    }

    /// Rim samples used for the screen-space bounding box.
    fn outline(&self) -> Vec<Vector3<f64>> {
        const N: usize = 24;
        let ring = |c: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, a: f64, b: f64| {
            (0..N).map(move |k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / N as f64;
                c + u * (a * t.cos()) + v * (b * t.sin())
            })
        };
        match *self {
            Shape::Ellipse { center, u, v, a, b, .. } => ring(center, u, v, a, b).collect(),
            Shape::Cylinder { p0, axis, length, radius } => {
                let u = perpendicular(&axis);
                let v = axis.cross(&u);
                ring(p0, u, v, radius, radius)
                    .chain(ring(p0 + axis * length, u, v, radius, radius))
                    .collect()
            }
        }
    }

    /// Depth (camera z) where the ray through `d = (x, y, 1)` first hits.
    fn intersect(&self, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Shape::Ellipse { center, normal, u, v, a, b } => {
                let denom = normal.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = normal.dot(&center) / denom;
                if t <= 0.0 {
                    return None;
                }
                let w = d * t - center;
                let (x, y) = (w.dot(&u) / a, w.dot(&v) / b);
                (x * x + y * y <= 1.0).then_some(t)
            }
            Shape::Cylinder { p0, axis, length, radius } => {
                let dp = d - axis * axis.dot(d);
                let w = -p0;
                let wp = w - axis * axis.dot(&w);
                let qa = dp.dot(&dp);
                if qa < 1e-18 {
                    return None;
                }
                let qb = 2.0 * dp.dot(&wp);
                let qc = wp.dot(&wp) - radius * radius;
                let disc = qb * qb - 4.0 * qa * qc;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [(-qb - s) / (2.0 * qa), (-qb + s) / (2.0 * qa)].into_iter().find(|&t| {
                    let h = (d * t - p0).dot(&axis);
                    t > 0.0 && (0.0..=length).contains(&h)
                })
            }
        }
    }
}

fn primitives(scene: &SceneSpec) -> Vec<Primitive> {
    let mut out = Vec::new();
    for (i, f) in scene.flowers.iter().enumerate() {
        let tag = PixelTag::Flower(i);
        out.push(Primitive {
            shape: disc(f.position, f.normal, f.petal_radius),
            class: SurfaceClass::Petal,
            tag,
        });
        out.push(Primitive {
            shape: cylinder(f.position, f.anther_top(), f.anther_radius),
            class: SurfaceClass::Anther,
            tag,
        });
        out.push(Primitive {
            shape: disc(f.anther_top(), f.normal, f.anther_radius),
            class: SurfaceClass::Anther,
            tag,
        });
    }
    for l in &scene.leaves {
        out.push(Primitive {
            shape: Shape::Ellipse {
                center: l.center,
                normal: l.normal,
                u: l.major_axis,
                v: l.normal.cross(&l.major_axis),
                a: l.semi_major,
                b: l.semi_minor,
            },
            class: SurfaceClass::Leaf,
            tag: PixelTag::Leaf,
        });
    }
    for c in &scene.canes {
        out.push(Primitive {
            shape: cylinder(c.start, c.end, c.radius),
            class: SurfaceClass::Cane,
            tag: PixelTag::Cane,
        });
    }
    for g in &scene.glints {
        out.push(Primitive {
            shape: disc(g.center, g.normal, g.radius),
            class: SurfaceClass::Glint,
            tag: PixelTag::Glint,
        });
    }
    out
}

/// Nearest surfaces closer than this to the camera are not sensed.
pub const MIN_RANGE: f64 = 0.02;

/// Renders the scene from `camera_pose` and returns the per-pixel tags too.
pub fn render_labeled<R: Rng + ?Sized>(
    scene: &SceneSpec,
    camera_pose: &Pose3,
    k: &CameraIntrinsics,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Rendered {
    let (w, h) = (k.width, k.height);
    let world_to_cam = camera_pose.inverse();
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut hit: Vec<Option<usize>> = vec![None; w * h];

    let prims = primitives(scene);
    for (pi, prim) in prims.iter().enumerate() {
        let shape = prim.shape.to_camera(&world_to_cam);
        let outline = shape.outline();
        let (mut u0, mut v0, mut u1, mut v1) = (0.0, 0.0, w as f64 - 1.0, h as f64 - 1.0);
        if outline.iter().all(|p| p.z > MIN_RANGE) {
            let us = outline.iter().map(|p| k.fx * p.x / p.z + k.cx);
            let vs = outline.iter().map(|p| k.fy * p.y / p.z + k.cy);
            u0 = us.clone().fold(f64::INFINITY, f64::min).floor().max(0.0);
            u1 = us.fold(f64::NEG_INFINITY, f64::max).ceil().min(w as f64 - 1.0);
            v0 = vs.clone().fold(f64::INFINITY, f64::min).floor().max(0.0);
            v1 = vs.fold(f64::NEG_INFINITY, f64::max).ceil().min(h as f64 - 1.0);
        } else if outline.iter().all(|p| p.z <= MIN_RANGE) {
            continue;
        }
        if u0 > u1 || v0 > v1 {
            continue;
        }
        for v in v0 as usize..=v1 as usize {
            for u in u0 as usize..=u1 as usize {
                let d = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                if let Some(t) = shape.intersect(&d) {
                    let i = v * w + u;
                    if t > MIN_RANGE && t < zbuf[i] {
                        zbuf[i] = t;
                        hit[i] = Some(pi);
                    }
                }
            }
        }
    }

    let mut image = RgbdImage::new(w, h);
    let mut tags = vec![PixelTag::Background; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let (class, depth) = match hit[i] {
                Some(pi) => {
                    tags[i] = prims[pi].tag;
                    (prims[pi].class, zbuf[i])
                }
                None => (SurfaceClass::Background, 0.0),
            };
            let stats = scene.colors.get(class);
            let mut color = [0u8; 3];
            for c in 0..3 {
                let s = stats.sigma[c].hypot(noise.color_sigma);
                let z: f64 = StandardNormal.sample(rng);
                color[c] = (stats.mean[c] + s * z).round().clamp(0.0, 255.0) as u8;
            }
            let depth = if depth > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                (depth * (1.0 + noise.depth_sigma * z)).max(MIN_RANGE)
            } else {
                0.0
            };
            image.set(u, v, color, depth);
        }
    }
    Rendered { image, tags }
}

pub fn render_rgbd<R: Rng + ?Sized>(
    scene: &SceneSpec,
    camera_pose: &Pose3,
    k: &CameraIntrinsics,
    noise: &NoiseSpec,
    rng: &mut R,
) -> RgbdImage {
    render_labeled(scene, camera_pose, k, noise, rng).image
}
