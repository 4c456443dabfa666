//! Cartesian visual servoing onto a flower and the pollination actuation.
//!
//! The controller first moves in the plane of the flower face until the
//! tool axis is over the flower center, then approaches along the remaining
//! offset. Angular velocity is always zero. When the Jacobian is
//! ill-conditioned the command falls back to translation only through the
//! reduced right pseudo-inverse.

use std::fmt::Write as _;

use nalgebra::{DVector, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose3;
use crate::kinematics::platform::{HandEyeLut, ParallelPlatform};
use crate::kinematics::{condition_check, reduced_pseudoinverse_velocities, solve_joint_velocities, SerialArmModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServoParams {
    pub parallel_threshold: f64,
    pub contact_distance: f64,
    /// Norm of every commanded joint velocity, rad/s.
    pub joint_speed: f64,
    pub dt: f64,
    pub condition_threshold: f64,
    pub blind_distance: f64,
    pub max_steps: usize,
}

impl Default for ServoParams {
    fn default() -> Self {
        Self {
            parallel_threshold: 0.005,
            contact_distance: 0.003,
            joint_speed: 0.15,
            dt: 0.05,
            condition_threshold: 100.0,
            blind_distance: 0.06,
            max_steps: 1000,
        }
    }
}

impl ServoParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.parallel_threshold,
            self.contact_distance,
            self.joint_speed,
            self.dt,
            self.condition_threshold,
            self.blind_distance,
        ];
        if pos.iter().any(|v| !(*v > 0.0)) || self.max_steps == 0 {
            return Err(Error::Config(format!("servo parameters must be positive: {self:?}")));
        }
        if self.contact_distance >= self.blind_distance {
            return Err(Error::Config("contact distance must be below the blind-approach distance".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServoPhase {
    ParallelAlign,
    OrthogonalApproach,
    TranslationOnly,
    BlindApproach,
    Contact,
    Failed,
}

impl ServoPhase {
    pub fn name(self) -> &'static str {
        match self {
            Self::ParallelAlign => "parallel_align",
            Self::OrthogonalApproach => "orthogonal_approach",
            Self::TranslationOnly => "translation_only",
            Self::BlindApproach => "blind_approach",
            Self::Contact => "contact",
            Self::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Contact | Self::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServoState {
    pub phase: ServoPhase,
    /// Phase to resume once conditioning recovers.
    pub resume: ServoPhase,
    pub d_par: Vector3<f64>,
    pub d_g: Vector3<f64>,
    pub step: usize,
}

impl Default for ServoState {
    fn default() -> Self {
        Self {
            phase: ServoPhase::ParallelAlign,
            resume: ServoPhase::ParallelAlign,
            d_par: Vector3::zeros(),
            d_g: Vector3::zeros(),
            step: 0,
        }
    }
}

impl ServoState {
    /// The controlling phase, looking through `TranslationOnly`.
    pub fn active(&self) -> ServoPhase {
        if self.phase == ServoPhase::TranslationOnly {
            self.resume
        } else {
            self.phase
        }
    }
}

/// `d_g` is flower minus tip; `d_par` is `d_g` with its component along the
/// flower normal removed.
pub fn compute_alignment(tip: &Pose3, flower: &Pose3) -> (Vector3<f64>, Vector3<f64>) {
    let d_g = flower.position - tip.position;
    let n = flower.z_axis();
    (d_g - n * n.dot(&d_g), d_g)
}

/// One control step. Returns the joint velocity command and the next state.
/// Terminal states return a zero command.
pub fn servo_step(
    state: &ServoState,
    arm: &SerialArmModel,
    q: &[f64],
    flower: &Pose3,
    params: &ServoParams,
) -> (DVector<f64>, ServoState) {
    let zero = DVector::zeros(q.len());
    let mut next = *state;
    if state.phase.is_terminal() {
        return (zero, next);
    }
    if state.step >= params.max_steps {
        next.phase = ServoPhase::Failed;
        return (zero, next);
    }
    let tip = match arm.forward_kinematics(q) {
        Ok(t) => t,
        Err(_) => {
            next.phase = ServoPhase::Failed;
            return (zero, next);
        }
    };
    let (d_par, d_g) = compute_alignment(&tip, flower);
    next.d_par = d_par;
    next.d_g = d_g;
    next.step += 1;

    let mut active = state.active();
    if active == ServoPhase::ParallelAlign && d_par.norm() < params.parallel_threshold {
        active = ServoPhase::OrthogonalApproach;
    }
    if active == ServoPhase::OrthogonalApproach && d_g.norm() < params.blind_distance {
        active = ServoPhase::BlindApproach;
    }
    if active == ServoPhase::BlindApproach {
        // the face is reached once the tip is within the contact distance of
        // the center or of the face plane
        let axial = -d_g.dot(&flower.z_axis());
        if d_g.norm() <= params.contact_distance || axial <= params.contact_distance {
            next.phase = ServoPhase::Contact;
            next.resume = ServoPhase::Contact;
            return (zero, next);
        }
    }

    let v = if active == ServoPhase::ParallelAlign { d_par } else { d_g };
    let j = match arm.jacobian(q) {
        Ok(j) => j,
        Err(_) => {
            next.phase = ServoPhase::Failed;
            return (zero, next);
        }
    };
    let qdot = if condition_check(&j, params.condition_threshold) {
        next.phase = ServoPhase::TranslationOnly;
        reduced_pseudoinverse_velocities(&j, &v)
    } else {
        next.phase = active;
        let mut x = DVector::zeros(6);
        x.fixed_rows_mut::<3>(0).copy_from(&v);
        solve_joint_velocities(&j, &x, params.condition_threshold)
    };
    next.resume = active;
    match qdot {
        Ok(qd) if qd.norm() > 0.0 => {
            let n = qd.norm();
            (qd * (params.joint_speed / n), next)
        }
        _ => {
            next.phase = ServoPhase::Failed;
            (zero, next)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub step: usize,
    pub phase: ServoPhase,
    pub d_par: f64,
    pub d_g: f64,
    pub q: Vec<f64>,
}

pub fn telemetry_csv(rows: &[TelemetryRow]) -> String {
    let dof = rows.first().map_or(0, |r| r.q.len());
    let mut s = String::from("step,phase,d_par,d_g");
    for i in 0..dof {
        let _ = write!(s, ",q{i}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{:.6},{:.6}", r.step, r.phase.name(), r.d_par, r.d_g);
        for v in &r.q {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    s
}

/// What the controller sees of the world during a closed-loop run.
pub trait ServoWorld {
    /// Flower pose estimate handed to the controller for this step.
    fn flower_estimate(&mut self, state: &ServoState, tip: &Pose3) -> Pose3;

    /// Called after each motion; returning true stops the run with physical
    /// contact at `to`.
    fn blocked(&mut self, _from: &Pose3, _to: &Pose3) -> bool {
        false
    }
}

/// A fixed flower pose and no obstacles.
pub struct KnownFlower(pub Pose3);

impl ServoWorld for KnownFlower {
    fn flower_estimate(&mut self, _state: &ServoState, _tip: &Pose3) -> Pose3 {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ServoRun {
    pub state: ServoState,
    pub q: Vec<f64>,
    pub telemetry: Vec<TelemetryRow>,
    pub tip_trace: Vec<Pose3>,
    /// True when the run ended because the world reported contact.
    pub physical_contact: bool,
}

/// Integrates `servo_step` with explicit Euler steps until a terminal phase.
pub fn run_servo(
    arm: &SerialArmModel,
    q0: &[f64],
    params: &ServoParams,
    world: &mut dyn ServoWorld,
) -> Result<ServoRun> {
    let mut q = q0.to_vec();
    let mut tip = arm.forward_kinematics(&q)?;
    let mut state = ServoState::default();
    let mut run = ServoRun {
        state,
        q: q.clone(),
        telemetry: Vec::new(),
        tip_trace: vec![tip],
        physical_contact: false,
    };
    while !state.phase.is_terminal() {
        let flower = world.flower_estimate(&state, &tip);
        let (qdot, next) = servo_step(&state, arm, &q, &flower, params);
        state = next;
        run.telemetry.push(TelemetryRow {
            step: state.step,
            phase: state.phase,
            d_par: state.d_par.norm(),
            d_g: state.d_g.norm(),
            q: q.clone(),
        });
        if state.phase.is_terminal() {
            break;
        }
        for (qi, d) in q.iter_mut().zip(qdot.iter()) {
            *qi += d * params.dt;
        }
        if arm.check_limits(&q).is_err() {
            arm.clamp(&mut q);
            state.phase = ServoPhase::Failed;
        }
        let new_tip = arm.forward_kinematics(&q)?;
        run.tip_trace.push(new_tip);
        if world.blocked(&tip, &new_tip) {
            state.phase = ServoPhase::Contact;
            run.physical_contact = true;
            break;
        }
        tip = new_tip;
    }
    run.state = state;
    run.q = q;
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PollinationPattern {
    pub cycles: usize,
    pub samples_per_cycle: usize,
    /// Common extension added at the peak of each cycle, meters.
    pub push: f64,
    /// Differential extension of the leading actuator, meters.
    pub tilt: f64,
}

impl Default for PollinationPattern {
    fn default() -> Self {
        Self {
            cycles: 3,
            samples_per_cycle: 8,
            push: 0.006,
            tilt: 0.006,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PollinationTrace {
    /// Command that aligns the plate with the flower face.
    pub aligned: [f64; 3],
    pub commands: Vec<[f64; 3]>,
    /// Plate pose in the world for each command.
    pub plate_poses: Vec<Pose3>,
}

/// Aligns the plate to the estimated flower face through the lookup table,
/// then runs the actuation pattern. Cycle `c` raises and lowers all three
/// actuators by `push` while actuator `c mod 3` leads by `tilt`, with the
/// sign of the lead alternating between cycles.
pub fn pollinate(
    platform: &ParallelPlatform,
    lut: &HandEyeLut,
    flower: &Pose3,
    tip: &Pose3,
    pattern: &PollinationPattern,
) -> PollinationTrace {
    // desired plate normal points into the flower face, in the tool frame
    let into_face = tip.inverse().rotate(&(-flower.z_axis()));
    let mid = platform.mid_command();
    let target = Pose3::with_z_axis(Vector3::new(0.0, 0.0, mid[0]), into_face);
    let aligned = lut.query(&target);

    let mut commands = Vec::with_capacity(pattern.cycles * pattern.samples_per_cycle);
    for c in 0..pattern.cycles {
        let lead = c % 3;
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        for k in 0..pattern.samples_per_cycle {
            let phase = 2.0 * std::f64::consts::PI * k as f64 / pattern.samples_per_cycle as f64;
            let wave = 0.5 * (1.0 - phase.cos());
            let mut cmd = aligned;
            for (i, v) in cmd.iter_mut().enumerate() {
                let diff = if i == lead { sign * pattern.tilt * wave } else { 0.0 };
                *v = (*v + pattern.push * wave + diff).clamp(platform.stroke_lower, platform.stroke_upper);
            }
            commands.push(cmd);
        }
    }
    let plate_poses = commands
        .iter()
        .map(|&c| tip.compose(&platform.forward_pose(c).expect("command clamped to stroke")))
        .collect();
    PollinationTrace {
        aligned,
        commands,
        plate_poses,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::platform::build_ik_lut;
    use crate::kinematics::IkOptions;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Flower whose normal faces the arm base horizontally, and an arm
    /// configuration with the tool at `standoff` in front, looking at it.
    fn setup(flower_pos: Vector3<f64>, standoff: f64, lateral: Vector3<f64>) -> (SerialArmModel, Pose3, Vec<f64>) {
        let arm = SerialArmModel::default();
        let n = Vector3::new(-flower_pos.x, -flower_pos.y, 0.0).normalize();
        let flower = Pose3::with_z_axis(flower_pos, n);
        let eye = flower_pos + n * standoff + lateral;
        let goal = Pose3::look_at(eye, eye - n, -Vector3::z());
        let q = arm.solve_ik(&goal, None, &IkOptions::default()).unwrap();
        (arm, flower, q)
    }

    #[test]
    fn alignment_components() {
        let flower = Pose3::with_z_axis(Vector3::new(0.5, 0.0, 0.4), -Vector3::x());
        let tip = Pose3::from_translation(Vector3::new(0.4, 0.0, 0.4));
        let (dp, dg) = compute_alignment(&tip, &flower);
        assert!(dp.norm() < 1e-15);
        assert!((dg.norm() - 0.1).abs() < 1e-12);
        let tip = Pose3::from_translation(Vector3::new(0.4, 0.03, 0.4));
        let (dp, _) = compute_alignment(&tip, &flower);
        assert!((dp.norm() - 0.03).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let r = |rng: &mut ChaCha8Rng| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let f = Pose3::new(r(&mut rng), UnitQuaternion::from_scaled_axis(r(&mut rng) * 2.0));
            let t = Pose3::from_translation(r(&mut rng));
            let (dp, _) = compute_alignment(&t, &f);
            assert!(dp.dot(&f.z_axis()).abs() < 1e-12);
        }
    }

    #[test]
    fn params_validation() {
        assert!(ServoParams::default().validate().is_ok());
        let bad = ServoParams { contact_distance: 0.1, ..ServoParams::default() };
        assert!(bad.validate().is_err());
        let bad = ServoParams { dt: 0.0, ..ServoParams::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn immediate_contact_when_already_there() {
        let (arm, flower, q) = setup(Vector3::new(0.5, 0.1, 0.35), 0.002, Vector3::zeros());
        let (qd, s) = servo_step(&ServoState::default(), &arm, &q, &flower, &ServoParams::default());
        assert_eq!(s.phase, ServoPhase::Contact);
        assert_eq!(qd.norm(), 0.0);
    }

    #[test]
    fn parallel_alignment_shrinks_offset() {
        let (arm, flower, mut q) = setup(Vector3::new(0.5, 0.05, 0.35), 0.15, Vector3::new(0.0, 0.03, 0.0));
        let p = ServoParams::default();
        let mut s = ServoState::default();
        let mut last = f64::INFINITY;
        loop {
            let (qd, next) = servo_step(&s, &arm, &q, &flower, &p);
            if next.phase != ServoPhase::ParallelAlign {
                assert!(next.d_par.norm() < p.parallel_threshold);
                break;
            }
            assert!(next.d_par.norm() < last);
            assert!((qd.norm() - p.joint_speed).abs() < 1e-9);
            last = next.d_par.norm();
            for (qi, d) in q.iter_mut().zip(qd.iter()) {
                *qi += d * p.dt;
            }
            s = next;
        }
    }

    #[test]
    fn approach_reaches_contact() {
        let (arm, flower, q) = setup(Vector3::new(0.45, -0.1, 0.3), 0.15, Vector3::new(0.01, 0.0, 0.02));
        let p = ServoParams::default();
        let run = run_servo(&arm, &q, &p, &mut KnownFlower(flower)).unwrap();
        assert_eq!(run.state.phase, ServoPhase::Contact);
        assert!(run.state.step <= 500);
        let tip = arm.forward_kinematics(&run.q).unwrap();
        let (dp, _) = compute_alignment(&tip, &flower);
        assert!(dp.norm() < 0.002);
        // every non-terminal command had the constant norm, and in the
        // orthogonal phase the distance kept falling
        let mut last = f64::INFINITY;
        for r in &run.telemetry {
            if r.phase == ServoPhase::OrthogonalApproach {
                assert!(r.d_g < last);
                last = r.d_g;
            }
        }
        let csv = telemetry_csv(&run.telemetry);
        assert!(csv.starts_with("step,phase,d_par,d_g,q0,q1,q2,q3,q4,q5\n"));
        assert_eq!(csv.lines().count(), run.telemetry.len() + 1);
    }

    #[test]
    fn singular_wrist_falls_back_to_translation() {
        let arm = SerialArmModel::default();
        // q4 = 0 aligns the axes of joints 3 and 5
        let q = [0.3, 0.8, -1.4, 0.5, 0.0, 0.2];
        let j = arm.jacobian(&q).unwrap();
        assert!(condition_check(&j, 100.0));
        let tip = arm.forward_kinematics(&q).unwrap();
        let flower = Pose3::with_z_axis(tip.position + tip.z_axis() * 0.1 + Vector3::new(0.0, 0.02, 0.0), -tip.z_axis());
        let p = ServoParams::default();
        let (qd, s) = servo_step(&ServoState::default(), &arm, &q, &flower, &p);
        assert_eq!(s.phase, ServoPhase::TranslationOnly);
        assert_eq!(s.resume, ServoPhase::ParallelAlign);
        assert!((qd.norm() - p.joint_speed).abs() < 1e-9);
        // the command is the scaled minimum-norm solution for d_par
        let raw = reduced_pseudoinverse_velocities(&j, &s.d_par).unwrap();
        assert!((raw.normalize() - qd.normalize()).norm() < 1e-9);
        let jr = j.rows(0, 3).into_owned();
        let v = &jr * &raw;
        assert!((v - DVector::from_column_slice(s.d_par.as_slice())).norm() < 1e-9);
    }

    #[test]
    fn step_budget_exhaustion_fails() {
        let (arm, flower, q) = setup(Vector3::new(0.5, 0.0, 0.35), 0.15, Vector3::zeros());
        let p = ServoParams { max_steps: 3, ..ServoParams::default() };
        let run = run_servo(&arm, &q, &p, &mut KnownFlower(flower)).unwrap();
        assert_eq!(run.state.phase, ServoPhase::Failed);
    }

    #[test]
    fn pollination_trace_structure() {
        let platform = ParallelPlatform::default();
        let lut = build_ik_lut(&platform, 0.0025).unwrap();
        let tip = Pose3::look_at(Vector3::new(0.35, 0.0, 0.3), Vector3::new(0.5, 0.0, 0.3), -Vector3::z());
        let flower = Pose3::with_z_axis(Vector3::new(0.5, 0.0, 0.3), -Vector3::x());
        let pattern = PollinationPattern::default();
        let trace = pollinate(&platform, &lut, &flower, &tip, &pattern);
        assert_eq!(trace.commands.len(), 3 * 8);
        assert_eq!(trace.plate_poses.len(), 24);
        // face parallel to the plate: level alignment, tilts stay in the envelope
        assert!(trace.aligned[0] == trace.aligned[1] && trace.aligned[1] == trace.aligned[2]);
        let max_tilt = platform
            .forward_pose([platform.stroke_upper, platform.stroke_lower, platform.stroke_lower])
            .unwrap()
            .z_axis()
            .angle(&Vector3::z());
        for p in &trace.plate_poses {
            assert!(p.z_axis().angle(&tip.z_axis()) <= max_tilt + 1e-12);
        }
    }

    #[test]
    fn tilted_flower_uses_nearest_lut_entry() {
        let platform = ParallelPlatform::default();
        let lut = build_ik_lut(&platform, 0.0025).unwrap();
        let tip = Pose3::look_at(Vector3::new(0.35, 0.0, 0.3), Vector3::new(0.5, 0.0, 0.3), -Vector3::z());
        let theta: f64 = 0.2;
        let n = Vector3::new(-theta.cos(), theta.sin(), 0.0);
        let flower = Pose3::with_z_axis(Vector3::new(0.5, 0.0, 0.3), n);
        let trace = pollinate(&platform, &lut, &flower, &tip, &PollinationPattern::default());
        let local = tip.inverse().rotate(&(-n));
        let target = Pose3::with_z_axis(Vector3::new(0.0, 0.0, 0.01), local);
        assert_eq!(trace.aligned, lut.query(&target));
        let plate = platform.forward_pose(trace.aligned).unwrap();
        assert!(plate.z_axis().angle(&local) < plate.z_axis().angle(&Vector3::z()));
        assert_eq!(trace.commands[0], trace.aligned);
    }
}
