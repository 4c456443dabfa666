//! TOML configuration covering every tunable default of the pipeline.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::classify::{TrainConfig, DEFAULT_ORIENTATION_YAW};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::kinematics::platform::{ParallelPlatform, DEFAULT_KAPPA};
use crate::kinematics::SerialArmModel;
use crate::mapping::{AssociationGate, FlowerMapConfig, OctreeConfig, POSITION_SIGMA, REFERENCE_RANGE};
use crate::planning::{PlannerConfig, DEFAULT_STANDOFF, MAX_FLOWER_DISTANCE};
use crate::segmentation::{PatchOptions, PriorMode, TrainOptions};
use crate::servo::{PollinationPattern, ServoParams};

use super::noise::{NoiseLevel, NoiseSpec};
use super::perception::SyntheticTrainingConfig;
use super::scene::{scenario_templates, ClassColors, ScenarioTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSection {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraSection {
    fn default() -> Self {
        let k = CameraIntrinsics::default();
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationSection {
    pub smoothing: f64,
    pub uniform_priors: bool,
    pub min_area: usize,
    pub inflation: usize,
}

impl Default for SegmentationSection {
    fn default() -> Self {
        let p = PatchOptions::default();
        Self {
            smoothing: TrainOptions::default().smoothing,
            uniform_priors: false,
            min_area: p.min_area,
            inflation: p.inflation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub orientation_yaw_deg: f64,
    pub sweep_images: usize,
    pub close_images: usize,
    pub orientation_margin_deg: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SyntheticTrainingConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            seed: s.seed,
            orientation_yaw_deg: DEFAULT_ORIENTATION_YAW.to_degrees(),
            sweep_images: s.sweep_images,
            close_images: s.close_images,
            orientation_margin_deg: s.orientation_margin.to_degrees(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    pub resolution: f64,
    pub max_depth: u32,
    pub center: [f64; 3],
    pub hit: f64,
    pub miss: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
    pub occupancy_threshold: f64,
    pub max_range: f64,
    /// Pixel stride used when inserting depth frames.
    pub scan_stride: usize,
    pub position_sigma: f64,
    pub reference_range: f64,
    pub mahalanobis_threshold: f64,
    pub new_track_distance: f64,
    pub min_observations: usize,
    pub orientation_weight: f64,
    /// Views whose azimuth is farther than this from a class yaw multiple
    /// carry no orientation information.
    pub orientation_view_tolerance_deg: f64,
    /// Orientation evidence is tempered by `min(1, orientation_range / depth)`.
    pub orientation_range: f64,
}

impl Default for MapSection {
    fn default() -> Self {
        let o = OctreeConfig::default();
        let g = AssociationGate::default();
        let f = FlowerMapConfig::default();
        Self {
            resolution: o.resolution,
            max_depth: o.max_depth,
            center: [0.5, 0.0, 0.5],
            hit: o.hit,
            miss: o.miss,
            clamp_min: o.clamp_min,
            clamp_max: o.clamp_max,
            occupancy_threshold: o.occupancy_threshold,
            max_range: 1.2,
            scan_stride: 8,
            position_sigma: POSITION_SIGMA,
            reference_range: REFERENCE_RANGE,
            mahalanobis_threshold: g.mahalanobis_threshold,
            new_track_distance: g.new_track_distance,
            min_observations: f.min_observations,
            orientation_weight: f.orientation_weight,
            orientation_view_tolerance_deg: 10.0,
            orientation_range: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub step: f64,
    pub max_samples: usize,
    pub goal_bias: f64,
    pub shortcut_passes: usize,
    pub clearance: f64,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub seed: u64,
    pub standoff: f64,
    pub max_flower_distance: f64,
    /// Tool position the tour starts from.
    pub home: [f64; 3],
}

impl Default for PlannerSection {
    fn default() -> Self {
        let p = PlannerConfig::default();
        Self {
            step: p.step,
            max_samples: p.max_samples,
            goal_bias: p.goal_bias,
            shortcut_passes: p.shortcut_passes,
            clearance: p.clearance,
            bounds_min: p.bounds_min.into(),
            bounds_max: p.bounds_max.into(),
            seed: p.seed,
            standoff: DEFAULT_STANDOFF,
            max_flower_distance: MAX_FLOWER_DISTANCE,
            home: [0.2, 0.0, 0.45],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoSection {
    pub parallel_threshold: f64,
    pub contact_distance: f64,
    pub joint_speed: f64,
    pub dt: f64,
    pub condition_threshold: f64,
    pub blind_distance: f64,
    pub max_steps: usize,
    /// Re-detect the flower every this many control steps before the blind
    /// approach.
    pub observe_every: usize,
    /// Extra observations fused at each vantage point.
    pub refine_observations: usize,
    /// Times the vantage may be moved when refinement changes the class.
    pub vantage_replans: usize,
}

impl Default for ServoSection {
    fn default() -> Self {
        let s = ServoParams::default();
        Self {
            parallel_threshold: s.parallel_threshold,
            contact_distance: s.contact_distance,
            joint_speed: s.joint_speed,
            dt: s.dt,
            condition_threshold: s.condition_threshold,
            blind_distance: s.blind_distance,
            max_steps: s.max_steps,
            observe_every: 10,
            refine_observations: 5,
            vantage_replans: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformSection {
    pub radius: f64,
    pub stroke_lower: f64,
    pub stroke_upper: f64,
    pub lut_step: f64,
    pub kappa: f64,
    pub cycles: usize,
    pub samples_per_cycle: usize,
    pub push: f64,
    pub tilt: f64,
}

impl Default for PlatformSection {
    fn default() -> Self {
        let p = ParallelPlatform::default();
        let q = PollinationPattern::default();
        Self {
            radius: p.radius,
            stroke_lower: p.stroke_lower,
            stroke_upper: p.stroke_upper,
            lut_step: 0.001,
            kappa: DEFAULT_KAPPA,
            cycles: q.cycles,
            samples_per_cycle: q.samples_per_cycle,
            push: q.push,
            tilt: q.tilt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    /// Axial tolerance of plate contact, standing in for plate compliance.
    pub contact_band: f64,
    /// Largest plate tilt against the flower face that still pollinates.
    pub tilt_limit_deg: f64,
    /// Radius for matching confirmed tracks to true flowers.
    pub match_radius: f64,
}

impl Default for ScoringSection {
    fn default() -> Self {
        Self {
            contact_band: 0.005,
            tilt_limit_deg: 20.0,
            match_radius: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub center: [f64; 3],
    pub radius: f64,
    pub azimuths_deg: Vec<f64>,
    pub elevations_deg: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            center: [0.5, 0.0, 0.4],
            radius: 0.5,
            azimuths_deg: vec![-40.0, -20.0, 0.0, 20.0, 40.0],
            elevations_deg: vec![5.0, 25.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub level: NoiseLevel,
    pub depth_sigma: Option<f64>,
    pub position_sigma: Option<f64>,
    pub confusion: Option<[[f64; 3]; 3]>,
    pub color_sigma: Option<f64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            level: NoiseLevel::Default,
            depth_sigma: None,
            position_sigma: None,
            confusion: None,
            color_sigma: None,
        }
    }
}

impl NoiseSection {
    pub fn spec(&self) -> NoiseSpec {
        let p = NoiseSpec::preset(self.level);
        NoiseSpec {
            depth_sigma: self.depth_sigma.unwrap_or(p.depth_sigma),
            position_sigma: self.position_sigma.unwrap_or(p.position_sigma),
            confusion: self.confusion.unwrap_or(p.confusion),
            color_sigma: self.color_sigma.unwrap_or(p.color_sigma),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialsSection {
    pub seed: u64,
    /// Trials per scenario, scenario 1 first.
    pub counts: Vec<usize>,
    pub scenarios: Vec<ScenarioTemplate>,
}

impl Default for TrialsSection {
    fn default() -> Self {
        Self {
            seed: 1,
            counts: vec![5, 5, 6, 6, 5, 7, 7, 6],
            scenarios: scenario_templates(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Optional arm description file; the built-in arm otherwise.
    pub arm_file: Option<PathBuf>,
    pub camera: CameraSection,
    pub segmentation: SegmentationSection,
    pub training: TrainingSection,
    pub map: MapSection,
    pub planner: PlannerSection,
    pub servo: ServoSection,
    pub platform: PlatformSection,
    pub scoring: ScoringSection,
    pub sweep: SweepSection,
    pub noise: NoiseSection,
    pub trials: TrialsSection,
    pub colors: ClassColors,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics()?;
        self.noise().validate()?;
        self.servo_params().validate()?;
        self.gate().validate()?;
        positive("training.learning_rate", self.training.learning_rate)?;
        positive("training.orientation_yaw_deg", self.training.orientation_yaw_deg)?;
        positive("segmentation.smoothing", self.segmentation.smoothing)?;
        positive("map.resolution", self.map.resolution)?;
        positive("map.max_range", self.map.max_range)?;
        positive("map.orientation_range", self.map.orientation_range)?;
        positive("map.position_sigma", self.map.position_sigma)?;
        positive("map.reference_range", self.map.reference_range)?;
        positive("planner.step", self.planner.step)?;
        positive("planner.standoff", self.planner.standoff)?;
        positive("platform.lut_step", self.platform.lut_step)?;
        positive("scoring.contact_band", self.scoring.contact_band)?;
        positive("sweep.radius", self.sweep.radius)?;
        if self.map.scan_stride == 0 || self.map.min_observations == 0 {
            return Err(Error::Config("map.scan_stride and map.min_observations must be at least 1".into()));
        }
        if self.servo.observe_every == 0 {
            return Err(Error::Config("servo.observe_every must be at least 1".into()));
        }
        if !(self.platform.stroke_upper > self.platform.stroke_lower) {
            return Err(Error::Config("platform stroke range is empty".into()));
        }
        if self.sweep.azimuths_deg.is_empty() || self.sweep.elevations_deg.is_empty() {
            return Err(Error::Config("sweep needs at least one pose".into()));
        }
        for t in &self.trials.scenarios {
            t.validate()?;
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let c = &self.camera;
        CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)
    }

    pub fn noise(&self) -> NoiseSpec {
        self.noise.spec()
    }

    pub fn orientation_yaw(&self) -> f64 {
        self.training.orientation_yaw_deg.to_radians()
    }

    pub fn patch_options(&self) -> PatchOptions {
        PatchOptions {
            min_area: self.segmentation.min_area,
            inflation: self.segmentation.inflation,
        }
    }

    pub fn color_options(&self) -> TrainOptions {
        TrainOptions {
            smoothing: self.segmentation.smoothing,
            priors: if self.segmentation.uniform_priors {
                PriorMode::Uniform
            } else {
                PriorMode::PixelFrequency
            },
        }
    }

    pub fn classifier_config(&self) -> TrainConfig {
        TrainConfig {
            num_classes: 2,
            epochs: self.training.epochs,
            learning_rate: self.training.learning_rate,
            seed: self.training.seed,
        }
    }

    pub fn synthetic_training(&self) -> SyntheticTrainingConfig {
        SyntheticTrainingConfig {
            sweep_images: self.training.sweep_images,
            close_images: self.training.close_images,
            orientation_margin: self.training.orientation_margin_deg.to_radians(),
            classifier: self.classifier_config(),
            color: self.color_options(),
            seed: self.training.seed,
        }
    }

    pub fn octree(&self) -> OctreeConfig {
        let m = &self.map;
        OctreeConfig {
            resolution: m.resolution,
            max_depth: m.max_depth,
            center: m.center.into(),
            hit: m.hit,
            miss: m.miss,
            clamp_min: m.clamp_min,
            clamp_max: m.clamp_max,
            occupancy_threshold: m.occupancy_threshold,
        }
    }

    pub fn gate(&self) -> AssociationGate {
        AssociationGate {
            mahalanobis_threshold: self.map.mahalanobis_threshold,
            new_track_distance: self.map.new_track_distance,
        }
    }

    pub fn flower_map(&self) -> FlowerMapConfig {
        FlowerMapConfig {
            gate: self.gate(),
            min_observations: self.map.min_observations,
            orientation_weight: self.map.orientation_weight,
            orientation_yaw: self.orientation_yaw(),
        }
    }

    pub fn planner(&self) -> PlannerConfig {
        let p = &self.planner;
        PlannerConfig {
            step: p.step,
            max_samples: p.max_samples,
            goal_bias: p.goal_bias,
            shortcut_passes: p.shortcut_passes,
            clearance: p.clearance,
            bounds_min: p.bounds_min.into(),
            bounds_max: p.bounds_max.into(),
            seed: p.seed,
        }
    }

    pub fn servo_params(&self) -> ServoParams {
        let s = &self.servo;
        ServoParams {
            parallel_threshold: s.parallel_threshold,
            contact_distance: s.contact_distance,
            joint_speed: s.joint_speed,
            dt: s.dt,
            condition_threshold: s.condition_threshold,
            blind_distance: s.blind_distance,
            max_steps: s.max_steps,
        }
    }

    pub fn platform(&self) -> ParallelPlatform {
        ParallelPlatform {
            radius: self.platform.radius,
            stroke_lower: self.platform.stroke_lower,
            stroke_upper: self.platform.stroke_upper,
        }
    }

    pub fn pollination(&self) -> PollinationPattern {
        PollinationPattern {
            cycles: self.platform.cycles,
            samples_per_cycle: self.platform.samples_per_cycle,
            push: self.platform.push,
            tilt: self.platform.tilt,
        }
    }

    pub fn arm(&self) -> Result<SerialArmModel> {
        match &self.arm_file {
            Some(p) => SerialArmModel::load(p),
            None => Ok(SerialArmModel::default()),
        }
    }

    pub fn sweep_center(&self) -> Vector3<f64> {
        self.sweep.center.into()
    }

    pub fn scenario(&self, id: usize) -> Result<ScenarioTemplate> {
        self.trials
            .scenarios
            .iter()
            .copied()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Config(format!("unknown scenario {id}")))
    }

    /// Configured trial count for a scenario, 5 when unlisted.
    pub fn trial_count(&self, id: usize) -> usize {
        let idx = self.trials.scenarios.iter().position(|t| t.id == id);
        idx.and_then(|i| self.trials.counts.get(i).copied()).unwrap_or(5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        assert_eq!(SimConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = SimConfig::from_toml("[servo]\nmax_steps = 500\n[noise]\nlevel = \"low\"\n").unwrap();
        assert_eq!(cfg.servo.max_steps, 500);
        assert_eq!(cfg.noise(), NoiseSpec::preset(NoiseLevel::Low));
        assert_eq!(cfg.planner, PlannerSection::default());
        assert_eq!(cfg.trial_count(7), 7);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(SimConfig::from_toml("[servo]\ndt = -1.0\n").is_err());
        assert!(SimConfig::from_toml("[noise]\nconfusion = [[1,0,0],[0,1,0],[0,0.5,0]]\n").is_err());
        assert!(SimConfig::from_toml("[camera]\nfx = 0.0\n").is_err());
        assert!(SimConfig::from_toml("unknown_key = 3\n").is_err());
    }
}
