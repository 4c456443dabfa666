//! Rigid poses, the pinhole camera and RGB-D frames.
//!
//! Camera frames follow the usual pinhole convention: +z forward (optical
//! axis), +x right, +y down. World frames are z-up with the arm base at the
//! origin.

use nalgebra::{Point3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Rigid transform. The quaternion is stored with `w >= 0` so that equal
/// rotations compare equal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose3 {
    pub position: Vector3<f64>,
    orientation: UnitQuaternion<f64>,
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    // Renormalize on every construction so drift cannot accumulate.
    let q = q.into_inner();
    let q = if q.w < 0.0 { -q } else { q };
    UnitQuaternion::from_quaternion(q)
}

impl Pose3 {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation: canonical(orientation),
        }
    }

    pub fn from_translation(position: Vector3<f64>) -> Self {
        Self::new(position, UnitQuaternion::identity())
    }

    /// Builds a pose from a raw `(w, x, y, z)` quaternion, normalizing it.
    pub fn from_wxyz(position: Vector3<f64>, w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::new(
            position,
            UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)),
        )
    }

    pub fn orientation(&self) -> UnitQuaternion<f64> {
        self.orientation
    }

    /// Quaternion coefficients as `(w, x, y, z)`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3::new(
            self.position + self.orientation * other.position,
            self.orientation * other.orientation,
        )
    }

    pub fn inverse(&self) -> Pose3 {
        let inv = self.orientation.inverse();
        Pose3::new(-(inv * self.position), inv)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.position + self.orientation * p
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * v
    }

    /// Local +z axis expressed in the parent frame.
    pub fn z_axis(&self) -> Vector3<f64> {
        self.orientation * Vector3::z()
    }

    pub fn angle_to(&self, other: &Pose3) -> f64 {
        self.orientation.angle_to(&other.orientation)
    }

    pub fn distance_to(&self, other: &Pose3) -> f64 {
        (self.position - other.position).norm()
    }

    /// Camera-style pose at `eye` looking toward `target`. The local +z axis
    /// points at the target and local +y is as close to `down` as possible.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Pose3 {
        let z = (target - eye).normalize();
        let mut x = down.cross(&z);
        if x.norm() < 1e-9 {
            // Looking straight along `down`; pick any perpendicular.
            x = z.cross(&Vector3::x());
            if x.norm() < 1e-9 {
                x = z.cross(&Vector3::y());
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rot = nalgebra::Rotation3::from_basis_unchecked(&[x, y, z]);
        Pose3::new(eye, UnitQuaternion::from_rotation_matrix(&rot))
    }

    /// Pose whose local +z axis equals `axis`, positioned at `position`.
    /// Rotation about the axis is the minimal rotation from world +z.
    pub fn with_z_axis(position: Vector3<f64>, axis: Vector3<f64>) -> Pose3 {
        let axis = axis.normalize();
        let rot = UnitQuaternion::rotation_between(&Vector3::z(), &axis).unwrap_or_else(|| {
            // Antiparallel: half turn about x.
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
        });
        Pose3::new(position, rot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 460.0,
            fy: 460.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics for the image subsampled by `stride` in both directions,
    /// where output pixel `(i, j)` is input pixel `(i * stride, j * stride)`.
    pub fn subsampled(&self, stride: usize) -> Self {
        let s = stride as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width.div_ceil(stride),
            height: self.height.div_ceil(stride),
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Camera-frame point seen at pixel `(u, v)` with range `depth` along +z.
pub fn back_project(pixel: (f64, f64), depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    let (u, v) = pixel;
    Ok(Vector3::new(
        (u - k.cx) * depth / k.fx,
        (v - k.cy) * depth / k.fy,
        depth,
    ))
}

/// Pixel coordinates of a camera-frame point. The result may fall outside
/// the image.
pub fn project(point: &Vector3<f64>, k: &CameraIntrinsics) -> Result<(f64, f64)> {
    if !(point.z > 0.0) {
        return Err(Error::BehindCamera(point.z));
    }
    Ok((
        k.fx * point.x / point.z + k.cx,
        k.fy * point.y / point.z + k.cy,
    ))
}

pub fn compose_pose(a: &Pose3, b: &Pose3) -> Pose3 {
    a.compose(b)
}

pub fn to_point(v: &Vector3<f64>) -> Point3<f64> {
    Point3::from(*v)
}

/// Row-major RGB-D frame. Depth is in meters; 0 marks an invalid reading.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdImage {
    width: usize,
    height: usize,
    rgb: Vec<[u8; 3]>,
    depth: Vec<f64>,
}

impl RgbdImage {
    /// Blank frame: black color, all depths invalid.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![[0, 0, 0]; width * height],
            depth: vec![0.0; width * height],
        }
    }

    pub fn from_parts(
        width: usize,
        height: usize,
        rgb: Vec<[u8; 3]>,
        depth: Vec<f64>,
    ) -> Result<Self> {
        if rgb.len() != width * height || depth.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} frame with {} color and {} depth samples",
                width,
                height,
                rgb.len(),
                depth.len()
            )));
        }
        if let Some(d) = depth.iter().find(|d| !(**d >= 0.0)) {
            return Err(Error::InvalidDepth(*d));
        }
        Ok(Self {
            width,
            height,
            rgb,
            depth,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb(&self) -> &[[u8; 3]] {
        &self.rgb
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn color_at(&self, u: usize, v: usize) -> [u8; 3] {
        self.rgb[self.index(u, v)]
    }

    #[inline]
    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[self.index(u, v)]
    }

    pub fn set(&mut self, u: usize, v: usize, color: [u8; 3], depth: f64) {
        let i = self.index(u, v);
        self.rgb[i] = color;
        self.depth[i] = depth.max(0.0);
    }

    pub fn set_color(&mut self, u: usize, v: usize, color: [u8; 3]) {
        let i = self.index(u, v);
        self.rgb[i] = color;
    }

    /// Keeps every `stride`-th pixel in both directions.
    pub fn subsample(&self, stride: usize) -> RgbdImage {
        let w = self.width.div_ceil(stride);
        let h = self.height.div_ceil(stride);
        let mut out = RgbdImage::new(w, h);
        for v in 0..h {
            for u in 0..w {
                let src = self.index(u * stride, v * stride);
                let dst = out.index(u, v);
                out.rgb[dst] = self.rgb[src];
                out.depth[dst] = self.depth[src];
            }
        }
        out
    }
}
