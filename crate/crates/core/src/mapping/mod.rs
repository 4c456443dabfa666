//! Workspace mapping: the occupancy octree used for collision checks and the
//! flower map, which fuses repeated flower observations into tracks.

pub mod factor_graph;
pub mod octree;

use std::fmt::Write as _;

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::classify::{ClassDistribution, OrientationClass};
use crate::error::{Error, Result};
use crate::geometry::Pose3;

pub use factor_graph::{optimize_tracks, FactorGraph, LmOptions, LmResult};
pub use octree::{OccupancyOctree, OctreeConfig};

/// Floor applied to observation probabilities before fusion so that a single
/// confident but wrong observation cannot zero out a class forever.
pub const ORIENTATION_FLOOR: f64 = 1e-6;

/// Position noise at the reference range.
pub const POSITION_SIGMA: f64 = 0.008;
pub const REFERENCE_RANGE: f64 = 0.4;

/// Isotropic measurement covariance for a detection at camera depth `z`.
pub fn range_covariance(z: f64) -> Matrix3<f64> {
    let s = POSITION_SIGMA * (z / REFERENCE_RANGE);
    Matrix3::identity() * (s * s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Candidate,
    Confirmed,
    Pollinated,
}

impl TrackStatus {
    pub fn name(self) -> &'static str {
        match self {
            Self::Candidate => "candidate",
            Self::Confirmed => "confirmed",
            Self::Pollinated => "pollinated",
        }
    }
}

/// One detection of a flower, already expressed in the world frame.
#[derive(Debug, Clone)]
pub struct FlowerObservation {
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub orientation: ClassDistribution,
}

#[derive(Debug, Clone)]
pub struct FlowerTrack {
    pub id: usize,
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub orientation: ClassDistribution,
    pub status: TrackStatus,
    /// Position measurements `(z, covariance)` fused into the track.
    pub measurements: Vec<(Vector3<f64>, Matrix3<f64>)>,
}

impl FlowerTrack {
    fn new(id: usize, obs: &FlowerObservation, weight: f64) -> Self {
        let mut t = Self {
            id,
            mean: obs.position,
            covariance: obs.covariance,
            orientation: ClassDistribution::uniform(obs.orientation.len()),
            status: TrackStatus::Candidate,
            measurements: vec![(obs.position, obs.covariance)],
        };
        t.orientation = fuse_orientation(&t.orientation, &obs.orientation, weight);
        t
    }

    pub fn observation_count(&self) -> usize {
        self.measurements.len()
    }

    pub fn orientation_class(&self) -> OrientationClass {
        OrientationClass::from_index(self.orientation.argmax())
    }

    /// Re-solves the position from all stored measurements.
    fn refit(&mut self) -> Result<()> {
        let mut graph = FactorGraph::new();
        let v = graph.add_variable();
        for (z, cov) in &self.measurements {
            graph.add_position_measurement(v, *z, *cov)?;
        }
        let res = optimize_tracks(&graph, &[self.mean])?;
        self.mean = res.values[0];
        self.covariance = res.covariances[0];
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AssociationGate {
    /// Maximum Mahalanobis distance under the combined covariance.
    pub mahalanobis_threshold: f64,
    /// Observations closer than this to a track mean are always treated as
    /// the same flower, even when the track covariance has become very tight.
    pub new_track_distance: f64,
}

impl Default for AssociationGate {
    fn default() -> Self {
        Self {
            mahalanobis_threshold: 4.0,
            new_track_distance: 0.03,
        }
    }
}

impl AssociationGate {
    pub fn validate(&self) -> Result<()> {
        if self.mahalanobis_threshold > 0.0 && self.new_track_distance > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("association thresholds must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Association {
    Existing(usize),
    NewTrack,
}

/// Mahalanobis distance between an observation and a track under the sum of
/// their covariances.
pub fn mahalanobis(track: &FlowerTrack, position: &Vector3<f64>, covariance: &Matrix3<f64>) -> f64 {
    let d = position - track.mean;
    let s = track.covariance + covariance;
    match s.cholesky() {
        Some(c) => d.dot(&c.solve(&d)).max(0.0).sqrt(),
        None => f64::INFINITY,
    }
}

/// Picks the gated track with the smallest Mahalanobis distance. Returns the
/// index into `tracks`, or `NewTrack`.
pub fn associate_observation(
    tracks: &[FlowerTrack],
    position: &Vector3<f64>,
    covariance: &Matrix3<f64>,
    gate: &AssociationGate,
) -> Association {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in tracks.iter().enumerate() {
        let m = mahalanobis(t, position, covariance);
        let near = (position - t.mean).norm() < gate.new_track_distance;
        if (m < gate.mahalanobis_threshold || near) && best.is_none_or(|(_, bm)| m < bm) {
            best = Some((i, m));
        }
    }
    best.map_or(Association::NewTrack, |(i, _)| Association::Existing(i))
}

/// Belief times `obs^weight`, pointwise, renormalized. Observation entries are
/// floored at [`ORIENTATION_FLOOR`].
pub fn fuse_orientation(belief: &ClassDistribution, obs: &ClassDistribution, weight: f64) -> ClassDistribution {
    let w: Vec<f64> = belief
        .probs()
        .iter()
        .zip(obs.probs())
        .map(|(b, o)| b * o.max(ORIENTATION_FLOOR).powf(weight))
        .collect();
    ClassDistribution::from_weights(w).unwrap_or_else(|_| belief.clone())
}

/// Flower normal for a given class yaw: the horizontal direction from the
/// flower toward the arm base, turned by `-yaw` about world z.
pub fn flower_normal(position: &Vector3<f64>, yaw: f64) -> Vector3<f64> {
    let h = Vector3::new(-position.x, -position.y, 0.0);
    let d = if h.norm() > 1e-9 { h.normalize() } else { -Vector3::x() };
    Rotation3::from_axis_angle(&Vector3::z_axis(), -yaw) * d
}

#[derive(Debug, Clone)]
pub struct FlowerEstimate {
    pub id: usize,
    pub pose: Pose3,
    pub class: OrientationClass,
    pub status: TrackStatus,
}

impl FlowerEstimate {
    pub fn normal(&self) -> Vector3<f64> {
        self.pose.z_axis()
    }
}

/// Poses of all tracks with at least `min_observations` measurements. The pose
/// z axis is the flower normal.
pub fn flower_map_snapshot(tracks: &[FlowerTrack], min_observations: usize, theta: f64) -> Vec<FlowerEstimate> {
    tracks
        .iter()
        .filter(|t| t.observation_count() >= min_observations)
        .map(|t| {
            let class = t.orientation_class();
            FlowerEstimate {
                id: t.id,
                pose: Pose3::with_z_axis(t.mean, flower_normal(&t.mean, class.yaw(theta))),
                class,
                status: t.status,
            }
        })
        .collect()
}

pub fn flower_map_csv(estimates: &[FlowerEstimate]) -> String {
    let mut s = String::from("id,x,y,z,qw,qx,qy,qz,class,status\n");
    for e in estimates {
        let p = e.pose.position;
        let [w, x, y, z] = e.pose.wxyz();
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            e.id,
            p.x,
            p.y,
            p.z,
            w,
            x,
            y,
            z,
            e.class.name(),
            e.status.name()
        );
    }
    s
}

#[derive(Debug, Clone, Copy)]
pub struct FlowerMapConfig {
    pub gate: AssociationGate,
    pub min_observations: usize,
    pub orientation_weight: f64,
    pub orientation_yaw: f64,
}

impl Default for FlowerMapConfig {
    fn default() -> Self {
        Self {
            gate: AssociationGate::default(),
            min_observations: 2,
            orientation_weight: 1.0,
            orientation_yaw: crate::classify::DEFAULT_ORIENTATION_YAW,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FlowerMap {
    pub config: FlowerMapConfig,
    tracks: Vec<FlowerTrack>,
    next_id: usize,
}

impl FlowerMap {
    pub fn new(config: FlowerMapConfig) -> Self {
        Self {
            config,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    pub fn tracks(&self) -> &[FlowerTrack] {
        &self.tracks
    }

    pub fn track(&self, id: usize) -> Option<&FlowerTrack> {
        self.tracks.iter().find(|t| t.id == id)
    }

    /// Fuses one observation and returns the id of the track it landed in.
    pub fn observe(&mut self, obs: &FlowerObservation) -> Result<usize> {
        match associate_observation(&self.tracks, &obs.position, &obs.covariance, &self.config.gate) {
            Association::Existing(i) => self.fuse_into(i, obs),
            Association::NewTrack => {
                let id = self.next_id;
                self.next_id += 1;
                let mut t = FlowerTrack::new(id, obs, self.config.orientation_weight);
                if self.config.min_observations <= 1 {
                    t.status = TrackStatus::Confirmed;
                }
                self.tracks.push(t);
                Ok(id)
            }
        }
    }

    /// Fuses an observation already attributed to track `id`, bypassing the
    /// association gate.
    pub fn observe_track(&mut self, id: usize, obs: &FlowerObservation) -> Result<usize> {
        let i = self
            .tracks
            .iter()
            .position(|t| t.id == id)
            .ok_or(Error::UnknownTrack(id))?;
        self.fuse_into(i, obs)
    }

    fn fuse_into(&mut self, i: usize, obs: &FlowerObservation) -> Result<usize> {
        let t = &mut self.tracks[i];
        t.measurements.push((obs.position, obs.covariance));
        t.refit()?;
        t.orientation = fuse_orientation(&t.orientation, &obs.orientation, self.config.orientation_weight);
        if t.status == TrackStatus::Candidate && t.observation_count() >= self.config.min_observations {
            t.status = TrackStatus::Confirmed;
        }
        Ok(t.id)
    }

    /// Merges tracks whose means lie closer than the gate's new-track
    /// distance; the older track keeps its id. Returns the number of merges.
    pub fn merge_nearby(&mut self) -> Result<usize> {
        let mut merged = 0;
        'outer: loop {
            for i in 0..self.tracks.len() {
                for j in i + 1..self.tracks.len() {
                    if (self.tracks[i].mean - self.tracks[j].mean).norm() >= self.config.gate.new_track_distance {
                        continue;
                    }
                    let gone = self.tracks.remove(j);
                    let t = &mut self.tracks[i];
                    t.measurements.extend(gone.measurements);
                    t.refit()?;
                    // both beliefs started from uniform, so their product is the joint posterior
                    t.orientation = fuse_orientation(&t.orientation, &gone.orientation, 1.0);
                    if t.status == TrackStatus::Candidate && t.observation_count() >= self.config.min_observations {
                        t.status = TrackStatus::Confirmed;
                    }
                    merged += 1;
                    continue 'outer;
                }
            }
            return Ok(merged);
        }
    }

    pub fn mark_pollinated(&mut self, id: usize) {
        if let Some(t) = self.tracks.iter_mut().find(|t| t.id == id) {
            t.status = TrackStatus::Pollinated;
        }
    }

    pub fn snapshot(&self) -> Vec<FlowerEstimate> {
        flower_map_snapshot(&self.tracks, self.config.min_observations, self.config.orientation_yaw)
    }
}
