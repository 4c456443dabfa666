//! Serial arm kinematics (standard DH, all revolute), velocity resolution for
//! servoing and a damped least-squares IK solver.

pub mod platform;

use std::path::Path;

use nalgebra::{DMatrix, DVector, Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose3;

pub use platform::{build_ik_lut, query_ik_lut, HandEyeLut, ParallelPlatform};

/// One standard Denavit-Hartenberg row: `Rz(theta + offset) Tz(d) Tx(a) Rx(alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    #[serde(default)]
    pub theta_offset: f64,
    pub lower: f64,
    pub upper: f64,
}

impl DhRow {
    fn transform(&self, q: f64) -> Isometry3<f64> {
        let (st, ct) = (q + self.theta_offset).sin_cos();
        let r = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q + self.theta_offset)
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.alpha);
        Isometry3::from_parts(Translation3::new(self.a * ct, self.a * st, self.d), r)
    }
}

/// 6 x n geometric Jacobian; rows are `(v, omega)` in the base frame.
pub type JacobianMatrix = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl JointState {
    pub fn at_rest(q: &[f64]) -> Self {
        Self {
            q: DVector::from_column_slice(q),
            qdot: DVector::zeros(q.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerialArmModel {
    pub joints: Vec<DhRow>,
    pub base: Pose3,
}

#[derive(Serialize, Deserialize)]
struct ArmFile {
    #[serde(default = "zero3")]
    base_position: [f64; 3],
    #[serde(default = "unit_wxyz")]
    base_orientation_wxyz: [f64; 4],
    joint: Vec<DhRow>,
}

fn zero3() -> [f64; 3] {
    [0.0; 3]
}

fn unit_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl Default for SerialArmModel {
    /// Six-joint elbow arm with an offset wrist, about 0.9 m of reach from the
    /// shoulder. The last row includes the pollinator tool, so the flange
    /// frame is the tool tip with +z along the approach direction.
    fn default() -> Self {
        use std::f64::consts::{FRAC_PI_2, PI};
        let row = |a, alpha, d, lower, upper| DhRow {
            a,
            alpha,
            d,
            theta_offset: 0.0,
            lower,
            upper,
        };
        Self {
            joints: vec![
                // continuous base yaw, so reach-over-the-back solutions can
                // still rotate past the rear
                row(0.0, FRAC_PI_2, 0.15, -2.0 * PI, 2.0 * PI),
                row(0.35, 0.0, 0.0, -PI, PI),
                row(0.30, 0.0, 0.0, -2.8, 2.8),
                row(0.0, FRAC_PI_2, 0.08, -PI, PI),
                row(0.0, -FRAC_PI_2, 0.08, -PI, PI),
                // continuous-turn wrist roll
                row(0.0, 0.0, 0.12, -2.0 * PI, 2.0 * PI),
            ],
            base: Pose3::identity(),
        }
    }
}

fn iso(p: &Pose3) -> Isometry3<f64> {
    Isometry3::from_parts(p.position.into(), p.orientation())
}

fn pose(i: &Isometry3<f64>) -> Pose3 {
    Pose3::new(i.translation.vector, i.rotation)
}

impl SerialArmModel {
    pub fn new(joints: Vec<DhRow>, base: Pose3) -> Result<Self> {
        let arm = Self { joints, base };
        arm.validate()?;
        Ok(arm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::Config("arm has no joints".into()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let vals = [j.a, j.alpha, j.d, j.theta_offset, j.lower, j.upper];
            if vals.iter().any(|v| !v.is_finite()) || j.lower >= j.upper {
                return Err(Error::Config(format!("joint {i} has invalid parameters {j:?}")));
            }
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Upper bound on the distance from the base origin to the tool tip.
    pub fn reach(&self) -> f64 {
        self.joints.iter().map(|j| j.a.hypot(j.d)).sum()
    }

    pub fn check_limits(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::DimensionMismatch(format!(
                "{} joint values for a {}-joint arm",
                q.len(),
                self.dof()
            )));
        }
        for (i, (j, &v)) in self.joints.iter().zip(q).enumerate() {
            if !(v >= j.lower && v <= j.upper) {
                return Err(Error::JointLimit {
                    joint: i,
                    value: v,
                    lower: j.lower,
                    upper: j.upper,
                });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, q: &mut [f64]) {
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.lower, j.upper);
        }
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.joints.iter().map(|j| 0.5 * (j.lower + j.upper)).collect()
    }

    /// Frames `0..=n` in the world: the base, then each joint frame.
    fn chain(&self, q: &[f64]) -> Vec<Isometry3<f64>> {
        let mut t = iso(&self.base);
        let mut out = Vec::with_capacity(q.len() + 1);
        out.push(t);
        for (row, &qi) in self.joints.iter().zip(q) {
            t *= row.transform(qi);
            out.push(t);
        }
        out
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Pose3> {
        self.check_limits(q)?;
        Ok(pose(self.chain(q).last().expect("base frame")))
    }

    /// All link frames, base first, tool last.
    pub fn frames(&self, q: &[f64]) -> Result<Vec<Pose3>> {
        self.check_limits(q)?;
        Ok(self.chain(q).iter().map(pose).collect())
    }

    pub fn jacobian(&self, q: &[f64]) -> Result<JacobianMatrix> {
        self.check_limits(q)?;
        Ok(self.jacobian_unchecked(q))
    }

    fn jacobian_unchecked(&self, q: &[f64]) -> JacobianMatrix {
        let frames = self.chain(q);
        let pe = frames[q.len()].translation.vector;
        let mut j = DMatrix::zeros(6, q.len());
        for i in 0..q.len() {
            // joint i rotates about z of frame i
            let z = frames[i].rotation * Vector3::z();
            let p = frames[i].translation.vector;
            let v = z.cross(&(pe - p));
            for r in 0..3 {
                j[(r, i)] = v[r];
                j[(r + 3, i)] = z[r];
            }
        }
        j
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(reason) => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    /// Parses the arm file format:
    ///
    /// ```toml
    /// base_position = [0.0, 0.0, 0.0]           # optional
    /// base_orientation_wxyz = [1.0, 0.0, 0.0, 0.0]  # optional
    /// [[joint]]
    /// a = 0.0
    /// alpha = 1.5707963267948966
    /// d = 0.15
    /// theta_offset = 0.0                        # optional
    /// lower = -3.14159
    /// upper = 3.14159
    /// ```
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: ArmFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let [w, x, y, z] = f.base_orientation_wxyz;
        let base = Pose3::from_wxyz(Vector3::from(f.base_position), w, x, y, z);
        Self::new(f.joint, base)
    }

    pub fn to_toml(&self) -> String {
        let f = ArmFile {
            base_position: self.base.position.into(),
            base_orientation_wxyz: self.base.wxyz(),
            joint: self.joints.clone(),
        };
        toml::to_string(&f).expect("arm model serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Damped least-squares IK from `seed`. Joint values are clamped to the
    /// limits after every step.
    pub fn inverse_kinematics(&self, target: &Pose3, seed: &[f64], opts: &IkOptions) -> Result<Vec<f64>> {
        self.check_limits(seed).or_else(|_| {
            if seed.len() == self.dof() {
                Ok(())
            } else {
                Err(Error::DimensionMismatch(format!("seed of length {}", seed.len())))
            }
        })?;
        let mut q = seed.to_vec();
        self.clamp(&mut q);
        let target_z = target.z_axis();
        let mut residual = f64::INFINITY;
        for _ in 0..opts.max_iterations {
            let frames = self.chain(&q);
            let tip = frames[q.len()];
            let ep = target.position - tip.translation.vector;
            let ew = if opts.free_roll {
                let z = tip.rotation * Vector3::z();
                let axis = z.cross(&target_z);
                let s = axis.norm();
                if s < 1e-12 {
                    if z.dot(&target_z) > 0.0 {
                        Vector3::zeros()
                    } else {
                        // antiparallel: any perpendicular axis works
                        (tip.rotation * Vector3::x()) * std::f64::consts::PI
                    }
                } else {
                    axis / s * s.atan2(z.dot(&target_z))
                }
            } else {
                (target.orientation() * tip.rotation.inverse()).scaled_axis()
            };
            residual = ep.norm().max(ew.norm() * opts.angle_scale);
            if ep.norm() < opts.position_tolerance && ew.norm() < opts.angle_tolerance {
                return Ok(q);
            }
            let mut e = DVector::zeros(6);
            e.fixed_rows_mut::<3>(0).copy_from(&ep);
            e.fixed_rows_mut::<3>(3).copy_from(&(ew * opts.angle_scale));
            let mut j = self.jacobian_unchecked(&q);
            for c in 0..j.ncols() {
                for r in 3..6 {
                    j[(r, c)] *= opts.angle_scale;
                }
            }
            let jt = j.transpose();
            let a = &j * &jt + DMatrix::identity(6, 6) * (opts.damping * opts.damping);
            let Some(chol) = a.cholesky() else {
                break;
            };
            let mut dq = jt * chol.solve(&e);
            let n = dq.norm();
            if n > opts.max_step {
                dq *= opts.max_step / n;
            }
            for (qi, d) in q.iter_mut().zip(dq.iter()) {
                *qi += d;
            }
            self.clamp(&mut q);
        }
        Err(Error::IkNoConvergence(residual))
    }
}

impl SerialArmModel {
    /// Multi-start IK: `seed` first (if any), then a fixed sequence of
    /// pseudo-random seeds. Among the first few solutions found, returns the
    /// best-conditioned one, which keeps later servoing away from
    /// singularities. Deterministic.
    pub fn solve_ik(&self, target: &Pose3, seed: Option<&[f64]>, opts: &IkOptions) -> Result<Vec<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut found = 0;
        let mut residual = f64::INFINITY;
        for attempt in 0..IK_ATTEMPTS {
            let start: Vec<f64> = match (attempt, seed) {
                (0, Some(s)) => s.to_vec(),
                _ => self.joints.iter().map(|j| rng.random_range(j.lower..j.upper)).collect(),
            };
            match self.inverse_kinematics(target, &start, opts) {
                Ok(q) => {
                    // prefer well-conditioned solutions with room to move
                    let margin = self
                        .joints
                        .iter()
                        .zip(&q)
                        .map(|(j, v)| (v - j.lower).min(j.upper - v))
                        .fold(f64::INFINITY, f64::min);
                    let score = sigma_ratio(&self.jacobian_unchecked(&q)) * (margin / LIMIT_MARGIN).clamp(0.0, 1.0);
                    let counts = sigma_ratio(&self.jacobian_unchecked(&q)) >= opts.min_sigma_ratio;
                    if best.as_ref().is_none_or(|(b, _)| score > *b) {
                        best = Some((score, q));
                    }
                    // poorly conditioned solutions are kept only as a fallback
                    if counts {
                        found += 1;
                    }
                    if found == IK_SOLUTIONS {
                        break;
                    }
                }
                Err(Error::IkNoConvergence(r)) => residual = residual.min(r),
                Err(e) => return Err(e),
            }
        }
        best.map(|(_, q)| q).ok_or(Error::IkNoConvergence(residual))
    }
}

const IK_ATTEMPTS: usize = 40;
const IK_SOLUTIONS: usize = 4;
const LIMIT_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, Copy)]
pub struct IkOptions {
    pub max_iterations: usize,
    pub position_tolerance: f64,
    pub angle_tolerance: f64,
    pub damping: f64,
    /// Radians per joint per iteration.
    pub max_step: f64,
    /// Meters per radian used to mix angular and linear error.
    pub angle_scale: f64,
    /// Ignore rotation about the tool axis.
    pub free_roll: bool,
    /// `solve_ik` keeps searching until it has solutions at least this well
    /// conditioned (or runs out of starts).
    pub min_sigma_ratio: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            max_iterations: 400,
            position_tolerance: 1e-5,
            angle_tolerance: 1e-4,
            damping: 0.02,
            max_step: 0.3,
            angle_scale: 0.2,
            free_roll: true,
            min_sigma_ratio: 0.02,
        }
    }
}

/// True when the Jacobian is ill-conditioned: `sigma_min / sigma_max < 1 / threshold`.
pub fn condition_check(j: &JacobianMatrix, threshold: f64) -> bool {
    sigma_ratio(j) < 1.0 / threshold
}

pub fn sigma_ratio(j: &JacobianMatrix) -> f64 {
    let s = j.clone().singular_values();
    let max = s.max();
    if max <= 0.0 || !max.is_finite() {
        return 0.0;
    }
    s.min() / max
}

/// `qdot = J^-1 xdot` for a square, well-conditioned Jacobian.
pub fn solve_joint_velocities(j: &JacobianMatrix, xdot: &DVector<f64>, threshold: f64) -> Result<DVector<f64>> {
    if !j.is_square() || j.nrows() != xdot.len() {
        return Err(Error::DimensionMismatch(format!(
            "Jacobian {:?} with a {}-vector",
            j.shape(),
            xdot.len()
        )));
    }
    let ratio = sigma_ratio(j);
    if ratio < 1.0 / threshold {
        return Err(Error::IllConditioned { ratio });
    }
    j.clone()
        .lu()
        .solve(xdot)
        .ok_or(Error::IllConditioned { ratio })
}

/// Minimum-norm joint rates for a linear velocity using the first three rows
/// of the Jacobian: `J_R^T (J_R J_R^T)^-1 v`.
pub fn reduced_pseudoinverse_velocities(j: &JacobianMatrix, v: &Vector3<f64>) -> Result<DVector<f64>> {
    if j.nrows() < 3 {
        return Err(Error::DimensionMismatch(format!("Jacobian {:?}", j.shape())));
    }
    let jr = j.rows(0, 3).into_owned();
    let m = &jr * jr.transpose();
    if sigma_ratio(&m) < 1e-12 {
        return Err(Error::RankDeficient);
    }
    let y = m.cholesky().ok_or(Error::RankDeficient)?.solve(&DVector::from_column_slice(v.as_slice()));
    Ok(jr.transpose() * y)
}
