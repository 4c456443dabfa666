//! Mapping sweep and the per-trial state machine.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::classify::{ClassDistribution, OrientationClass};
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, Pose3};
use crate::kinematics::platform::{build_ik_lut, HandEyeLut, ParallelPlatform};
use crate::kinematics::{IkOptions, SerialArmModel};
use crate::mapping::{flower_normal, FlowerEstimate, FlowerMap, FlowerObservation, OccupancyOctree, TrackStatus};
use crate::planning::{
    build_cost_matrix, generate_vantage_points, prune_unreachable, solve_tsp, CostMatrix, PathPolyline, Tour,
};
use crate::servo::{pollinate, run_servo, ServoPhase, ServoState, ServoWorld, TelemetryRow};

use super::config::{SimConfig, SweepSection};
use super::noise::NoiseSpec;
use super::perception::{train_synthetic, view_azimuth, Detection, Perception, PerceptionModels};
use super::render::render_rgbd;
use super::scene::{Flower, SceneSpec};

/// Everything shared by the trials of one run: configuration, trained
/// perception, the arm and its end effector.
pub struct SimContext {
    pub config: SimConfig,
    pub intrinsics: CameraIntrinsics,
    pub noise: NoiseSpec,
    pub perception: Perception,
    pub arm: SerialArmModel,
    pub platform: ParallelPlatform,
    pub handeye: HandEyeLut,
}

impl SimContext {
    pub fn new(config: SimConfig, models: PerceptionModels) -> Result<Self> {
        config.validate()?;
        let intrinsics = config.intrinsics()?;
        let platform = config.platform();
        let mut handeye = build_ik_lut(&platform, config.platform.lut_step)?;
        handeye.kappa = config.platform.kappa;
        Ok(Self {
            noise: config.noise(),
            perception: Perception::new(models, config.patch_options(), intrinsics),
            arm: config.arm()?,
            intrinsics,
            platform,
            handeye,
            config,
        })
    }

    /// Trains perception on the synthetic generator, then builds the context.
    pub fn with_synthetic_training(config: SimConfig) -> Result<Self> {
        let models = train_models(&config)?;
        Self::new(config, models)
    }

    fn theta(&self) -> f64 {
        self.config.orientation_yaw()
    }

    /// Estimated pose of a track: fused position, normal from the class belief.
    pub fn track_pose(&self, map: &FlowerMap, track: usize) -> Option<Pose3> {
        let t = map.track(track)?;
        let yaw = t.orientation_class().yaw(self.theta());
        Some(Pose3::with_z_axis(t.mean, flower_normal(&t.mean, yaw)))
    }
}

pub fn train_models(config: &SimConfig) -> Result<PerceptionModels> {
    let (models, _) = train_synthetic(
        &config.synthetic_training(),
        config.sweep_center(),
        &config.intrinsics()?,
        &config.noise(),
        &config.patch_options(),
        config.orientation_yaw(),
    )?;
    Ok(models)
}

/// Camera poses on an arc around the sweep center, elevation-major.
pub fn sweep_poses(s: &SweepSection) -> Vec<Pose3> {
    let center = Vector3::from(s.center);
    let mut out = Vec::new();
    for el in &s.elevations_deg {
        for az in &s.azimuths_deg {
            let (az, el) = (az.to_radians(), el.to_radians());
            let eye = center - Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), -el.sin()) * s.radius;
            out.push(Pose3::look_at(eye, center, -Vector3::z()));
        }
    }
    out
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Turns a detection into a world-frame observation: adds the configured
/// position noise, passes the orientation answer through the confusion
/// matrix, and re-expresses it relative to the arm base.
pub fn detection_observation<R: Rng + ?Sized>(
    ctx: &SimContext,
    det: &Detection,
    camera: &Pose3,
    rng: &mut R,
) -> FlowerObservation {
    let map = &ctx.config.map;
    let z = det.depth;
    let s = ctx.noise.position_sigma * z / map.reference_range;
    let jitter = Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng)) * s;
    let position = camera.transform_point(&det.camera_point) + jitter;
    let sc = map.position_sigma * z / map.reference_range;

    // reported class drawn from the confusion row of the classifier's answer;
    // its likelihood over true classes is the matching confusion column
    let row = ctx.noise.confusion[det.orientation.argmax()];
    let x: f64 = rng.random();
    let mut reported = 2;
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if x < acc {
            reported = j;
            break;
        }
    }
    let column: Vec<f64> = (0..3).map(|i| ctx.noise.confusion[i][reported]).collect();
    let relative = ClassDistribution::from_weights(column).unwrap_or_else(|_| ClassDistribution::uniform(3));

    let theta = ctx.theta();
    let tolerance = map.orientation_view_tolerance_deg.to_radians();
    let phi = view_azimuth(&position, &camera.position);
    let snapped = (-2..=2).map(|m| (phi - m as f64 * theta).abs()).fold(f64::INFINITY, f64::min);
    let orientation = if snapped <= tolerance && camera_roll(camera) <= tolerance {
        let mut p = vec![0.0; 3];
        for (j, pj) in relative.probs().iter().enumerate() {
            let support = absolute_support(OrientationClass::from_index(j), phi, theta);
            for k in &support {
                p[k.index()] += pj / support.len() as f64;
            }
        }
        // distant views are less reliable and their errors repeat across frames
        let w = (map.orientation_range / z).min(1.0);
        let p: Vec<f64> = p.iter().map(|v| v.powf(w)).collect();
        ClassDistribution::from_weights(p).unwrap_or_else(|_| ClassDistribution::uniform(3))
    } else {
        ClassDistribution::uniform(3)
    };

    FlowerObservation {
        position,
        covariance: Matrix3::identity() * (sc * sc),
        orientation,
    }
}

/// Absolute classes consistent with relative class `rel` seen from view
/// azimuth `phi`. The classifier saturates, so the two outer relative classes
/// also stand for every larger turn in their direction.
fn absolute_support(rel: OrientationClass, phi: f64, theta: f64) -> Vec<OrientationClass> {
    let center = OrientationClass::nearest(rel.yaw(theta) + phi, theta);
    let all = [OrientationClass::C1, OrientationClass::C2, OrientationClass::C3];
    let side = rel.yaw(theta);
    all.into_iter()
        .filter(|k| {
            let d = k.yaw(theta) - center.yaw(theta);
            if side > 0.0 {
                d >= -1e-9
            } else if side < 0.0 {
                d <= 1e-9
            } else {
                d.abs() < 1e-9
            }
        })
        .collect()
}

/// Angle between the image down axis and world down as seen in the image
/// plane. A camera looking straight up or down counts as fully rolled.
pub fn camera_roll(camera: &Pose3) -> f64 {
    let r = camera.orientation();
    let forward = r * Vector3::z();
    let down = -Vector3::z();
    let in_plane = down - forward * down.dot(&forward);
    if in_plane.norm() < 1e-6 {
        return std::f64::consts::PI;
    }
    (r * Vector3::y()).angle(&in_plane)
}

#[derive(Debug, Clone)]
pub struct MappingResult {
    pub octree: OccupancyOctree,
    pub map: FlowerMap,
    pub detections: usize,
}

/// Renders each pose, integrates the depth frame into the octree and fuses
/// every flower detection into the flower map.
pub fn run_mapping_sweep<R: Rng + ?Sized>(
    ctx: &SimContext,
    scene: &SceneSpec,
    poses: &[Pose3],
    rng: &mut R,
) -> Result<MappingResult> {
    let cfg = &ctx.config;
    let mut octree = OccupancyOctree::new(cfg.octree());
    let mut map = FlowerMap::new(cfg.flower_map());
    let mut detections = 0;
    let stride = cfg.map.scan_stride;
    let k_sub = ctx.intrinsics.subsampled(stride);
    for pose in poses {
        let image = render_rgbd(scene, pose, &ctx.intrinsics, &ctx.noise, rng);
        octree.insert_depth_scan(pose, &image.subsample(stride), &k_sub, cfg.map.max_range);
        for det in ctx.perception.detect(&image) {
            let obs = detection_observation(ctx, &det, pose, rng);
            map.observe(&obs)?;
            detections += 1;
        }
    }
    map.merge_nearby()?;
    Ok(MappingResult { octree, map, detections })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsmState {
    Idle,
    MapWorkspace,
    PlanTour,
    MoveToVantage,
    RefinePose,
    ServoAlign,
    ServoApproach,
    Pollinate,
    NextFlower,
    Done,
}

impl FsmState {
    pub fn name(self) -> &'static str {
        match self {
            Self::Idle => "idle",
            Self::MapWorkspace => "map_workspace",
            Self::PlanTour => "plan_tour",
            Self::MoveToVantage => "move_to_vantage",
            Self::RefinePose => "refine_pose",
            Self::ServoAlign => "servo_align",
            Self::ServoApproach => "servo_approach",
            Self::Pollinate => "pollinate",
            Self::NextFlower => "next_flower",
            Self::Done => "done",
        }
    }
}

impl fmt::Display for FsmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsmEvent {
    pub state: FsmState,
    pub track: Option<usize>,
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pollinated,
    /// Touched without pollinating.
    Touched,
    Missed,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pollinated => "pollinated",
            Self::Touched => "touched",
            Self::Missed => "missed",
        }
    }

    pub fn touched(self) -> bool {
        self != Self::Missed
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactScore {
    pub touched: bool,
    pub pollinated: bool,
    /// Smallest in-plane distance of the plate center from the flower axis.
    pub lateral: f64,
    /// Plate tilt against the flower face at the aligned command, radians.
    pub tilt: f64,
    /// Closest approach to the flower surface; zero when touched.
    pub miss_distance: f64,
}

impl ContactScore {
    pub fn outcome(&self) -> Outcome {
        if self.pollinated {
            Outcome::Pollinated
        } else if self.touched {
            Outcome::Touched
        } else {
            Outcome::Missed
        }
    }
}

/// Contact-point scoring of a plate trace against the true flower. A sample
/// touches when the plate center lies over the petal disc and within `band`
/// of the surface beneath it (the anther top inside the anther radius, the
/// petal plane elsewhere), or past it. It pollinates when that contact is
/// inside the anther radius with the plate tilted at most `tilt_limit`.
pub fn score_contact(flower: &Flower, plate_poses: &[Pose3], band: f64, tilt_limit: f64) -> ContactScore {
    let n = flower.normal;
    let mut score = ContactScore {
        touched: false,
        pollinated: false,
        lateral: f64::INFINITY,
        tilt: plate_poses.first().map_or(0.0, |p| p.z_axis().angle(&-n)),
        miss_distance: f64::INFINITY,
    };
    for p in plate_poses {
        let w = p.position - flower.position;
        let axial = w.dot(&n);
        let rho = (w - n * axial).norm();
        score.lateral = score.lateral.min(rho);
        let tilt = p.z_axis().angle(&-n);
        let gap = if rho <= flower.anther_radius {
            axial - flower.anther_height
        } else if rho <= flower.petal_radius {
            axial
        } else {
            score.miss_distance = score.miss_distance.min((rho - flower.petal_radius).hypot(axial.max(0.0)));
            continue;
        };
        if gap <= band {
            score.touched = true;
            score.miss_distance = 0.0;
            if rho <= flower.anther_radius && tilt <= tilt_limit {
                score.pollinated = true;
            }
        } else {
            score.miss_distance = score.miss_distance.min(gap);
        }
    }
    score
}

/// True when the segment `from -> to` passes through the disc from its
/// front side.
fn crosses_disc(from: &Vector3<f64>, to: &Vector3<f64>, center: &Vector3<f64>, n: &Vector3<f64>, r: f64) -> bool {
    let s0 = (from - center).dot(n);
    let s1 = (to - center).dot(n);
    if !(s0 > 0.0 && s1 <= 0.0) {
        return false;
    }
    let x = from + (to - from) * (s0 / (s0 - s1));
    let w = x - center;
    (w - n * w.dot(n)).norm() <= r
}

/// Closed-loop view of one flower during servoing: periodic re-detection
/// from the tool camera, frozen once the blind approach starts, and physical
/// contact with the true flower surfaces.
struct ServoView<'a, R: Rng + ?Sized> {
    ctx: &'a SimContext,
    scene: &'a SceneSpec,
    map: &'a mut FlowerMap,
    track: usize,
    estimate: Pose3,
    truth: Option<Flower>,
    rng: &'a mut R,
    observations: usize,
}

impl<R: Rng + ?Sized> ServoView<'_, R> {
    /// Renders from `camera` and fuses the detection nearest the current
    /// estimate into the target track. Returns whether one was found.
    fn observe_from(&mut self, camera: &Pose3) -> Result<bool> {
        let image = render_rgbd(self.scene, camera, &self.ctx.intrinsics, &self.ctx.noise, self.rng);
        let dets = self.ctx.perception.detect(&image);
        let mut best: Option<(f64, FlowerObservation)> = None;
        for det in &dets {
            let obs = detection_observation(self.ctx, det, camera, self.rng);
            let d = (obs.position - self.estimate.position).norm();
            if d <= self.ctx.config.scoring.match_radius && best.as_ref().is_none_or(|(b, _)| d < *b) {
                best = Some((d, obs));
            }
        }
        let Some((_, obs)) = best else {
            return Ok(false);
        };
        self.map.observe_track(self.track, &obs)?;
        if let Some(p) = self.ctx.track_pose(self.map, self.track) {
            self.estimate = p;
        }
        self.observations += 1;
        Ok(true)
    }
}

impl<R: Rng + ?Sized> ServoWorld for ServoView<'_, R> {
    fn flower_estimate(&mut self, state: &ServoState, tip: &Pose3) -> Pose3 {
        let every = self.ctx.config.servo.observe_every;
        let looking = matches!(state.active(), ServoPhase::ParallelAlign | ServoPhase::OrthogonalApproach);
        if looking && state.step > 0 && state.step % every == 0 {
            if let Err(e) = self.observe_from(tip) {
                log::warn!("servo observation failed: {e}");
            }
        }
        self.estimate
    }

    fn blocked(&mut self, from: &Pose3, to: &Pose3) -> bool {
        let Some(f) = self.truth else {
            return false;
        };
        let (a, b) = (from.position, to.position);
        crosses_disc(&a, &b, &f.anther_top(), &f.normal, f.anther_radius)
            || crosses_disc(&a, &b, &f.position, &f.normal, f.petal_radius)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttemptRecord {
    pub track: usize,
    /// Matched true flower; `None` for a false-positive track.
    pub flower: Option<usize>,
    pub outcome: Outcome,
    /// In-plane tip offset from the true flower center when servoing ended.
    pub lateral_error: Option<f64>,
    pub tilt: Option<f64>,
    pub miss_distance: Option<f64>,
    pub servo_steps: usize,
    pub servo_end: Option<ServoPhase>,
    pub estimated_class: OrientationClass,
    pub true_class: Option<OrientationClass>,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub scenario: usize,
    pub trial: usize,
    pub seed: u64,
    pub reachable: usize,
    /// Reachable flowers matched by a confirmed track after mapping.
    pub detected: usize,
    /// Confirmed tracks matching no flower.
    pub false_positives: usize,
    pub attempts: Vec<AttemptRecord>,
    pub events: Vec<FsmEvent>,
    /// Servo telemetry tagged with the track id.
    pub telemetry: Vec<(usize, TelemetryRow)>,
    pub flower_map: Vec<FlowerEstimate>,
    pub octree: OccupancyOctree,
    pub tour: Option<(Tour, CostMatrix, Vec<String>)>,
    pub paths: Vec<PathPolyline>,
}

impl TrialResult {
    pub fn attempted(&self) -> impl Iterator<Item = &AttemptRecord> {
        self.attempts.iter().filter(|a| a.flower.is_some())
    }

    pub fn count(&self, pred: impl Fn(Outcome) -> bool) -> usize {
        self.attempted().filter(|a| pred(a.outcome)).count()
    }
}

/// One-to-one greedy nearest matching of tracks to true flowers.
pub fn match_tracks(estimates: &[FlowerEstimate], flowers: &[Flower], radius: f64) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (i, e) in estimates.iter().enumerate() {
        for (j, f) in flowers.iter().enumerate() {
            let d = (e.pose.position - f.position).norm();
            if d <= radius {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; estimates.len()];
    let mut used = vec![false; flowers.len()];
    for (_, i, j) in pairs {
        if out[i].is_none() && !used[j] {
            out[i] = Some(j);
            used[j] = true;
        }
    }
    out
}

/// Executes one full trial on `scene`; all randomness comes from `noise_seed`.
pub fn run_fsm(ctx: &SimContext, scene: &SceneSpec, noise_seed: u64) -> Result<TrialResult> {
    let cfg = &ctx.config;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let theta = ctx.theta();
    let mut events = Vec::new();
    let mut event = |state: FsmState, track: Option<usize>, note: String| {
        log::debug!("{state} {track:?} {note}");
        events.push(FsmEvent { state, track, note });
    };
    event(FsmState::Idle, None, String::new());

    let poses = sweep_poses(&cfg.sweep);
    event(FsmState::MapWorkspace, None, format!("{} poses", poses.len()));
    let MappingResult { octree, mut map, .. } = run_mapping_sweep(ctx, scene, &poses, &mut rng)?;

    let confirmed: Vec<FlowerEstimate> =
        map.snapshot().into_iter().filter(|e| e.status == TrackStatus::Confirmed).collect();
    let matches = match_tracks(&confirmed, &scene.flowers, cfg.scoring.match_radius);
    let reachable = scene.reachable();
    let detected = matches.iter().flatten().filter(|j| reachable.contains(j)).count();
    let false_positives = matches.iter().filter(|m| m.is_none()).count();
    event(
        FsmState::PlanTour,
        None,
        format!("{} confirmed, {detected} of {} reachable matched", confirmed.len(), reachable.len()),
    );

    let vantages = generate_vantage_points(&confirmed, cfg.planner.standoff, cfg.planner.max_flower_distance);
    let home_pose = Pose3::look_at(cfg.planner.home.into(), cfg.sweep_center(), -Vector3::z());
    let ik = IkOptions::default();
    let mut q = ctx.arm.solve_ik(&home_pose, None, &ik)?;
    let mut tour_poses = vec![home_pose];
    tour_poses.extend(vantages.vantages.iter().map(|v| v.pose));
    let legs = build_cost_matrix(&tour_poses, &octree, &cfg.planner());
    let keep = prune_unreachable(&legs.costs, 0);
    let sub = CostMatrix(nalgebra::DMatrix::from_fn(keep.len(), keep.len(), |i, j| legs.costs.get(keep[i], keep[j])));
    let labels: Vec<String> = keep
        .iter()
        .map(|&i| if i == 0 { "home".to_string() } else { format!("track{}", vantages.vantages[i - 1].flower_id) })
        .collect();
    let tour = solve_tsp(&sub, 0)?;
    let mut paths = Vec::new();
    for w in tour.order.windows(2) {
        paths.extend(legs.paths[keep[w[0]]][keep[w[1]]].clone());
    }

    let match_of = |track: usize| {
        confirmed
            .iter()
            .position(|e| e.id == track)
            .and_then(|i| matches[i])
    };

    let mut attempts = Vec::new();
    let mut telemetry = Vec::new();
    for &vi in tour.order.iter().skip(1) {
        let vantage = &vantages.vantages[keep[vi] - 1];
        let track = vantage.flower_id;
        let flower_idx = match_of(track);
        let truth = flower_idx.map(|j| scene.flowers[j]);
        let initial_class = map.track(track).map(|t| t.orientation_class()).unwrap_or(OrientationClass::C1);
        let mut record = AttemptRecord {
            track,
            flower: flower_idx,
            outcome: Outcome::Missed,
            lateral_error: None,
            tilt: None,
            miss_distance: None,
            servo_steps: 0,
            servo_end: None,
            estimated_class: initial_class,
            true_class: truth.map(|f| f.class(theta)),
            note: String::new(),
        };

        // upright views keep the orientation classifier on familiar images
        let upright = IkOptions { free_roll: false, ..ik };
        let reach = |pose: &Pose3, q: &[f64]| {
            ctx.arm
                .solve_ik(pose, Some(q), &upright)
                .or_else(|_| ctx.arm.solve_ik(pose, Some(q), &ik))
        };
        let position = vantage.flower_position;
        let vantage_for = |class: OrientationClass| {
            let eye = position + flower_normal(&position, class.yaw(theta)) * cfg.planner.standoff;
            Pose3::look_at(eye, position, -Vector3::z())
        };

        // Refinement starts from the central view, where every relative
        // class maps to exactly one absolute class; then the planned vantage
        // and the remaining classes by belief.
        let mut candidates = vec![(OrientationClass::C1, vantage_for(OrientationClass::C1))];
        if initial_class != OrientationClass::C1 {
            candidates.push((initial_class, vantage.pose));
        }
        if let Some(t) = map.track(track) {
            let mut order: Vec<usize> = (0..3).collect();
            order.sort_by(|a, b| t.orientation.probs()[*b].total_cmp(&t.orientation.probs()[*a]));
            for k in order.into_iter().map(OrientationClass::from_index) {
                if candidates.iter().all(|(c, _)| *c != k) {
                    candidates.push((k, vantage_for(k)));
                }
            }
        }
        event(FsmState::MoveToVantage, Some(track), String::new());
        let mut reached = None;
        let mut last_err = None;
        for (class, pose) in &candidates {
            match reach(pose, &q) {
                Ok(qv) => {
                    reached = Some((*class, qv));
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        let Some((mut class_used, q_vantage)) = reached else {
            record.note = format!("vantage unreachable: {}", last_err.map_or_else(String::new, |e| e.to_string()));
            event(FsmState::NextFlower, Some(track), record.note.clone());
            attempts.push(record);
            continue;
        };
        q = q_vantage;

        let mut refined = 0;
        for round in 0..=cfg.servo.vantage_replans {
            event(FsmState::RefinePose, Some(track), format!("round {round}"));
            let camera = ctx.arm.forward_kinematics(&q)?;
            let estimate = ctx.track_pose(&map, track).unwrap_or(vantage.pose);
            let mut view = ServoView {
                ctx,
                scene,
                map: &mut map,
                track,
                estimate,
                truth,
                rng: &mut rng,
                observations: 0,
            };
            for _ in 0..cfg.servo.refine_observations {
                view.observe_from(&camera)?;
            }
            refined += view.observations;
            let class = map.track(track).map_or(class_used, |t| t.orientation_class());
            if class == class_used || round == cfg.servo.vantage_replans {
                break;
            }
            // the refined class points elsewhere; look again from in front of it
            let Ok(qv) = reach(&vantage_for(class), &q) else {
                break;
            };
            event(FsmState::MoveToVantage, Some(track), format!("replanned for {class:?}"));
            class_used = class;
            q = qv;
        }
        let estimate = ctx.track_pose(&map, track).unwrap_or(vantage.pose);
        let mut view = ServoView {
            ctx,
            scene,
            map: &mut map,
            track,
            estimate,
            truth,
            rng: &mut rng,
            observations: 0,
        };

        event(FsmState::ServoAlign, Some(track), format!("{refined} refinement observations"));
        let run = run_servo(&ctx.arm, &q, &cfg.servo_params(), &mut view)?;
        let estimate = view.estimate;
        if let Some(row) = run.telemetry.iter().find(|r| r.phase != ServoPhase::ParallelAlign) {
            event(FsmState::ServoApproach, Some(track), format!("step {}", row.step));
        }
        telemetry.extend(run.telemetry.iter().cloned().map(|r| (track, r)));
        q = run.q.clone();
        record.servo_steps = run.state.step;
        record.servo_end = Some(run.state.phase);
        record.estimated_class = map.track(track).map(|t| t.orientation_class()).unwrap_or(initial_class);

        event(FsmState::Pollinate, Some(track), run.state.phase.name().to_string());
        let tip = ctx.arm.forward_kinematics(&q)?;
        let trace = pollinate(&ctx.platform, &ctx.handeye, &estimate, &tip, &cfg.pollination());
        if let Some(f) = truth {
            let w = tip.position - f.position;
            record.lateral_error = Some((w - f.normal * w.dot(&f.normal)).norm());
            let score = score_contact(
                &f,
                &trace.plate_poses,
                cfg.scoring.contact_band,
                cfg.scoring.tilt_limit_deg.to_radians(),
            );
            record.outcome = score.outcome();
            record.tilt = Some(score.tilt);
            record.miss_distance = Some(score.miss_distance);
        } else {
            record.note = "false positive".into();
        }
        map.mark_pollinated(track);
        event(FsmState::NextFlower, Some(track), record.outcome.name().to_string());
        attempts.push(record);
    }
    event(FsmState::Done, None, String::new());

    Ok(TrialResult {
        scenario: 0,
        trial: 0,
        seed: noise_seed,
        reachable: reachable.len(),
        detected,
        false_positives,
        attempts,
        events,
        telemetry,
        flower_map: map.snapshot(),
        octree,
        tour: Some((tour, sub, labels)),
        paths,
    })
}
