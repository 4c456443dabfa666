//! Tabletop simulation: scene generation, rendering, synthetic training and
//! the end-to-end trial loop.

pub mod config;
pub mod noise;
pub mod perception;
pub mod pipeline;
pub mod render;
pub mod report;
pub mod scene;

pub use config::SimConfig;
pub use noise::{NoiseLevel, NoiseSpec};
pub use pipeline::{run_fsm, run_mapping_sweep, sweep_poses, FsmState, Outcome, SimContext, TrialResult};
pub use scene::{generate_scene, scenario_template, scenario_templates, ScenarioTemplate, SceneSpec};
pub use report::{run_bench, run_trial, run_trials, Bench, TrialReport, TrialSummary};
