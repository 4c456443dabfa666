//! Three-actuator parallel plate carried by the end effector, and the
//! lookup table that stands in for its inverse kinematics.
//!
//! Actuator `i` sits at angle `120° * i` on a circle of radius `radius` in the
//! end-effector xy plane and extends along +z. The plate is treated as rigid
//! between the three tips.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::Pose3;
use crate::segmentation::ByteReader;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParallelPlatform {
    pub radius: f64,
    pub stroke_lower: f64,
    pub stroke_upper: f64,
}

impl Default for ParallelPlatform {
    fn default() -> Self {
        Self {
            radius: 0.03,
            stroke_lower: 0.0,
            stroke_upper: 0.02,
        }
    }
}

impl ParallelPlatform {
    pub fn actuator_base(&self, i: usize) -> Vector3<f64> {
        let a = 2.0 * std::f64::consts::PI * i as f64 / 3.0;
        Vector3::new(self.radius * a.cos(), self.radius * a.sin(), 0.0)
    }

    pub fn tips(&self, cmd: [f64; 3]) -> Result<[Vector3<f64>; 3]> {
        for &e in &cmd {
            if !(e >= self.stroke_lower && e <= self.stroke_upper) {
                return Err(Error::StrokeViolation {
                    value: e,
                    lower: self.stroke_lower,
                    upper: self.stroke_upper,
                });
            }
        }
        Ok([0, 1, 2].map(|i| self.actuator_base(i) + Vector3::new(0.0, 0.0, cmd[i])))
    }

    /// Plate pose in the end-effector frame: the tip centroid, with +z along
    /// the plate normal.
    pub fn forward_pose(&self, cmd: [f64; 3]) -> Result<Pose3> {
        let [a, b, c] = self.tips(cmd)?;
        let n = (b - a).cross(&(c - a)).normalize();
        Ok(Pose3::with_z_axis((a + b + c) / 3.0, n))
    }

    pub fn mid_command(&self) -> [f64; 3] {
        [0.5 * (self.stroke_lower + self.stroke_upper); 3]
    }
}

pub fn platform_forward_pose(platform: &ParallelPlatform, cmd: [f64; 3]) -> Result<Pose3> {
    platform.forward_pose(cmd)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LutEntry {
    pub command: [f64; 3],
    pub pose: Pose3,
}

/// Exhaustive grid of actuator commands and the plate poses they produce.
#[derive(Debug, Clone, PartialEq)]
pub struct HandEyeLut {
    pub step: f64,
    pub lower: f64,
    pub upper: f64,
    /// Meters per radian in the query metric.
    pub kappa: f64,
    pub entries: Vec<LutEntry>,
}

pub const DEFAULT_KAPPA: f64 = 0.05;

const MAGIC: &[u8; 4] = b"PSHE";
const VERSION: u32 = 1;

pub fn build_ik_lut(platform: &ParallelPlatform, step: f64) -> Result<HandEyeLut> {
    let range = platform.stroke_upper - platform.stroke_lower;
    let cells = range / step;
    if !(step > 0.0) || (cells - cells.round()).abs() > 1e-9 {
        return Err(Error::Config(format!("grid step {step} does not divide stroke range {range}")));
    }
    let n = cells.round() as usize + 1;
    let at = |i: usize| {
        if i + 1 == n {
            platform.stroke_upper
        } else {
            platform.stroke_lower + step * i as f64
        }
    };
    let mut entries = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let command = [at(i), at(j), at(k)];
                entries.push(LutEntry {
                    command,
                    pose: platform.forward_pose(command)?,
                });
            }
        }
    }
    Ok(HandEyeLut {
        step,
        lower: platform.stroke_lower,
        upper: platform.stroke_upper,
        kappa: DEFAULT_KAPPA,
        entries,
    })
}

/// Command whose recorded pose minimizes `|dp| + kappa * angle`. Ties keep the
/// lowest entry index.
pub fn query_ik_lut(lut: &HandEyeLut, target: &Pose3) -> [f64; 3] {
    let mut best = (f64::INFINITY, lut.entries[0].command);
    for e in &lut.entries {
        let d = e.pose.distance_to(target) + lut.kappa * e.pose.angle_to(target);
        if d < best.0 {
            best = (d, e.command);
        }
    }
    best.1
}

impl HandEyeLut {
    pub fn query(&self, target: &Pose3) -> [f64; 3] {
        query_ik_lut(self, target)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + self.entries.len() * 80);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.step, self.lower, self.upper, self.kappa] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let p = e.pose.position;
            let q = e.pose.wxyz();
            for v in e.command.iter().chain(p.iter()).chain(q.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC || r.u32()? != VERSION {
            return None;
        }
        let (step, lower, upper, kappa) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v = [0.0; 10];
            for x in &mut v {
                *x = r.f64()?;
            }
            entries.push(LutEntry {
                command: [v[0], v[1], v[2]],
                pose: Pose3::from_wxyz(Vector3::new(v[3], v[4], v[5]), v[6], v[7], v[8], v[9]),
            });
        }
        if !r.is_empty() || entries.is_empty() {
            return None;
        }
        Some(Self {
            step,
            lower,
            upper,
            kappa,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: "not a hand-eye lookup table".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, UnitQuaternion};

    /// Plane `z = a x + b y + c` through three points, solved as a linear
    /// system; returns the upward unit normal.
    fn plane_normal(p: [Vector3<f64>; 3]) -> Vector3<f64> {
        let m = Matrix3::from_fn(|r, c| [p[r].x, p[r].y, 1.0][c]);
        let z = Vector3::new(p[0].z, p[1].z, p[2].z);
        let s = m.lu().solve(&z).unwrap();
        Vector3::new(-s[0], -s[1], 1.0).normalize()
    }

    #[test]
    fn equal_extensions_do_not_tilt() {
        let p = ParallelPlatform::default();
        for e in [0.0, 0.007, 0.02] {
            let pose = p.forward_pose([e; 3]).unwrap();
            assert!((pose.position - Vector3::new(0.0, 0.0, e)).norm() < 1e-15);
            assert!(pose.orientation().angle() < 1e-12);
        }
    }

    #[test]
    fn single_actuator_tilts_plate_away() {
        let p = ParallelPlatform::default();
        let (e, d) = (0.005, 0.01);
        let pose = p.forward_pose([e + d, e, e]).unwrap();
        let tips = p.tips([e + d, e, e]).unwrap();
        let n = plane_normal(tips);
        assert!((pose.z_axis() - n).norm() < 1e-12);
        // actuator 0 is at +x, actuators 1 and 2 at x = -r/2
        let tilt = (d / (1.5 * p.radius)).atan();
        assert!((pose.z_axis().angle(&Vector3::z()) - tilt).abs() < 1e-12);
        assert!(pose.z_axis().x < 0.0);
        assert!((pose.position.z - (e + d / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn stroke_bounds() {
        let p = ParallelPlatform::default();
        let pose = p.forward_pose([p.stroke_upper, p.stroke_lower, p.stroke_lower]).unwrap();
        assert!(pose.position.iter().all(|v| v.is_finite()));
        let max_tilt = pose.z_axis().angle(&Vector3::z());
        let other = p.forward_pose([0.012, 0.004, 0.0]).unwrap();
        assert!(other.z_axis().angle(&Vector3::z()) < max_tilt);
        assert!(matches!(
            p.forward_pose([0.021, 0.0, 0.0]),
            Err(Error::StrokeViolation { .. })
        ));
        assert!(p.forward_pose([-1e-9, 0.0, 0.0]).is_err());
    }

    #[test]
    fn lut_grid() {
        let p = ParallelPlatform::default();
        let lut = build_ik_lut(&p, 0.01).unwrap();
        assert_eq!(lut.entries.len(), 27);
        assert_eq!(lut.entries[0].command, [0.0; 3]);
        assert_eq!(lut.entries[26].command, [0.02; 3]);
        for e in &lut.entries {
            assert_eq!(e.pose, p.forward_pose(e.command).unwrap());
        }
        assert!(build_ik_lut(&p, 0.003).is_err());
        assert!(build_ik_lut(&p, 0.0).is_err());
    }

    #[test]
    fn lut_round_trip_on_grid() {
        let p = ParallelPlatform::default();
        let lut = build_ik_lut(&p, 0.0025).unwrap();
        assert_eq!(lut.entries.len(), 729);
        for e in &lut.entries {
            assert_eq!(query_ik_lut(&lut, &e.pose), e.command);
        }
    }

    #[test]
    fn lut_nearest_and_far_targets() {
        let p = ParallelPlatform::default();
        let lut = build_ik_lut(&p, 0.01).unwrap();
        // between the level poses at 0 and 10 mm, closer to 0
        let t = Pose3::from_translation(Vector3::new(0.0, 0.0, 0.004));
        assert_eq!(lut.query(&t), [0.0; 3]);
        let t = Pose3::from_translation(Vector3::new(0.0, 0.0, 0.006));
        assert_eq!(lut.query(&t), [0.01; 3]);
        let far = Pose3::new(
            Vector3::new(0.0, 0.0, 5.0),
            UnitQuaternion::identity(),
        );
        assert_eq!(lut.query(&far), [0.02; 3]);
    }

    #[test]
    fn lut_persistence() {
        let lut = build_ik_lut(&ParallelPlatform::default(), 0.005).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("handeye.lut");
        lut.save(&path).unwrap();
        assert_eq!(HandEyeLut::load(&path).unwrap(), lut);
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(HandEyeLut::load(&path), Err(Error::Format { .. })));
    }
}
