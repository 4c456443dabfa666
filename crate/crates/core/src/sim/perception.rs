//! Per-frame flower detection and the synthetic training pipeline behind it.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classify::{
    orientation_features, patch_features, train_reference_classifier, ClassDistribution, LinearSoftmaxClassifier,
    OrientationClass, PatchClassifier, TrainConfig, FLOWER,
};
use crate::error::Result;
use crate::geometry::{back_project, CameraIntrinsics, Pose3, RgbdImage};
use crate::segmentation::{
    build_lut, extract_patches, segment_image, train_color_model, ColorHistogramModel, ColorLut, LabeledImage,
    PatchOptions, PatchRegion, TrainOptions,
};

use super::noise::NoiseSpec;
use super::render::{render_labeled, PixelTag, Rendered};
use super::scene::{generate_scene, scenario_templates, SceneSpec};

pub const COLOR_MODEL_FILE: &str = "color.model";
pub const FLOWER_CLASSIFIER_FILE: &str = "flower.clf";
pub const ORIENTATION_CLASSIFIER_FILE: &str = "orientation.clf";

#[derive(Debug, Clone)]
pub struct PerceptionModels {
    pub color: ColorHistogramModel,
    pub flower: LinearSoftmaxClassifier,
    pub orientation: LinearSoftmaxClassifier,
}

impl PerceptionModels {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.color.save(&dir.join(COLOR_MODEL_FILE))?;
        self.flower.save(&dir.join(FLOWER_CLASSIFIER_FILE))?;
        self.orientation.save(&dir.join(ORIENTATION_CLASSIFIER_FILE))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            color: ColorHistogramModel::load(&dir.join(COLOR_MODEL_FILE))?,
            flower: LinearSoftmaxClassifier::load(&dir.join(FLOWER_CLASSIFIER_FILE))?,
            orientation: LinearSoftmaxClassifier::load(&dir.join(ORIENTATION_CLASSIFIER_FILE))?,
        })
    }
}

/// A patch the flower classifier accepted.
#[derive(Debug, Clone)]
pub struct Detection {
    pub centroid: (f64, f64),
    pub area: usize,
    /// Median valid depth over the component pixels.
    pub depth: f64,
    pub camera_point: Vector3<f64>,
    pub flower_probability: f64,
    /// Orientation classes relative to the viewing camera.
    pub orientation: ClassDistribution,
}

pub struct Perception {
    pub models: PerceptionModels,
    pub lut: ColorLut,
    pub patch_options: PatchOptions,
    pub intrinsics: CameraIntrinsics,
}

impl Perception {
    pub fn new(models: PerceptionModels, patch_options: PatchOptions, intrinsics: CameraIntrinsics) -> Self {
        let lut = build_lut(&models.color);
        Self {
            models,
            lut,
            patch_options,
            intrinsics,
        }
    }

    pub fn patches(&self, image: &RgbdImage) -> Vec<PatchRegion> {
        extract_patches(&segment_image(&self.lut, image), &self.patch_options)
    }

    pub fn detect(&self, image: &RgbdImage) -> Vec<Detection> {
        let mut out = Vec::new();
        for patch in self.patches(image) {
            let p = self.models.flower.classify(&patch_features(&patch, image));
            if p.argmax() != FLOWER {
                continue;
            }
            let Some(depth) = median_depth(&patch, image) else {
                continue;
            };
            let Ok(camera_point) = back_project(patch.centroid, depth, &self.intrinsics) else {
                continue;
            };
            out.push(Detection {
                centroid: patch.centroid,
                area: patch.area,
                depth,
                camera_point,
                flower_probability: p.probs()[FLOWER],
                orientation: self.models.orientation.classify(&orientation_features(&patch, image)),
            });
        }
        out
    }
}

fn median_depth(patch: &PatchRegion, image: &RgbdImage) -> Option<f64> {
    let mut d: Vec<f64> = patch
        .pixels
        .iter()
        .map(|&(u, v)| image.depth_at(u, v))
        .filter(|z| *z > 0.0)
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

/// Signed azimuth of the viewing direction at `flower`, measured in the same
/// sense as flower yaw: zero when the camera lies toward the arm base.
pub fn view_azimuth(flower: &Vector3<f64>, camera: &Vector3<f64>) -> f64 {
    let reference = Vector3::new(-flower.x, -flower.y, 0.0);
    let view = Vector3::new(camera.x - flower.x, camera.y - flower.y, 0.0);
    if reference.norm() < 1e-9 || view.norm() < 1e-9 {
        return 0.0;
    }
    -f64::atan2(reference.cross(&view).z, reference.dot(&view))
}

/// Relative yaw of a flower seen from `camera`.
pub fn relative_yaw(flower_yaw: f64, flower: &Vector3<f64>, camera: &Vector3<f64>) -> f64 {
    flower_yaw - view_azimuth(flower, camera)
}

#[derive(Debug, Clone, Copy)]
pub struct SyntheticTrainingConfig {
    /// Frames rendered from mapping-sweep-like viewpoints.
    pub sweep_images: usize,
    /// Close-up frames rendered from in front of single flowers.
    pub close_images: usize,
    /// Relative yaws farther than this from every class center are left out
    /// of the orientation set.
    pub orientation_margin: f64,
    pub classifier: TrainConfig,
    pub color: TrainOptions,
    pub seed: u64,
}

impl Default for SyntheticTrainingConfig {
    fn default() -> Self {
        Self {
            sweep_images: 32,
            close_images: 32,
            orientation_margin: 10f64.to_radians(),
            classifier: TrainConfig::default(),
            color: TrainOptions::default(),
            seed: 7,
        }
    }
}

struct TrainingFrame {
    scene: SceneSpec,
    camera: Pose3,
    rendered: Rendered,
}

#[derive(Debug, Clone, Default)]
pub struct PatchDatasets {
    pub flower: Vec<(Vec<f64>, usize)>,
    pub orientation: Vec<(Vec<f64>, usize)>,
}

fn training_frames(
    cfg: &SyntheticTrainingConfig,
    sweep_center: Vector3<f64>,
    k: &CameraIntrinsics,
    noise: &NoiseSpec,
    theta: f64,
) -> Result<Vec<TrainingFrame>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates = scenario_templates();
    let mut frames = Vec::new();
    for i in 0..cfg.sweep_images + cfg.close_images {
        let t = templates[i % templates.len()];
        let scene = generate_scene(&t, rng.random())?;
        let camera = if i < cfg.sweep_images {
            let az: f64 = rng.random_range(-45f64..45.0).to_radians();
            let el: f64 = rng.random_range(0f64..30.0).to_radians();
            let r = rng.random_range(0.4..0.6);
            let eye = sweep_center - Vector3::new(az.cos() * el.cos(), az.sin() * el.cos(), -el.sin()) * r;
            let target = sweep_center + Vector3::new(0.0, rng.random_range(-0.1..0.1), rng.random_range(-0.08..0.08));
            Pose3::look_at(eye, target, -Vector3::z())
        } else {
            let f = scene.flowers[rng.random_range(0..scene.flowers.len())];
            // view from near one of the class directions so every relative
            // class shows up
            let m = rng.random_range(-1i32..=1) as f64;
            let phi = f.yaw + m * theta + rng.random_range(-8f64..8.0).to_radians();
            let dir = crate::mapping::flower_normal(&f.position, phi);
            let dist = rng.random_range(0.1..0.32);
            let eye = f.position + dir * dist + Vector3::new(0.0, 0.0, rng.random_range(-0.03..0.03));
            let target = f.position + Vector3::new(0.0, rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
            Pose3::look_at(eye, target, -Vector3::z())
        };
        let rendered = render_labeled(&scene, &camera, k, noise, &mut rng);
        frames.push(TrainingFrame { scene, camera, rendered });
    }
    Ok(frames)
}

/// Labels the segmentation patches of each frame from the render tags.
fn patch_datasets(frames: &[TrainingFrame], lut: &ColorLut, opts: &PatchOptions, cfg: &SyntheticTrainingConfig, theta: f64) -> PatchDatasets {
    let mut out = PatchDatasets::default();
    for frame in frames {
        let image = &frame.rendered.image;
        let w = image.width();
        for patch in extract_patches(&segment_image(lut, image), opts) {
            let mut counts = std::collections::BTreeMap::new();
            for &(u, v) in &patch.pixels {
                if let PixelTag::Flower(i) = frame.rendered.tags[v * w + u] {
                    *counts.entry(i).or_insert(0usize) += 1;
                }
            }
            let best = counts.iter().max_by_key(|(_, c)| **c).map(|(i, c)| (*i, *c));
            let is_flower = best.is_some_and(|(_, c)| 2 * c >= patch.area);
            out.flower.push((patch_features(&patch, image), usize::from(is_flower)));
            if let (true, Some((i, _))) = (is_flower, best) {
                let f = &frame.scene.flowers[i];
                let r = relative_yaw(f.yaw, &f.position, &frame.camera.position);
                let class = OrientationClass::nearest(r, theta);
                if (class.yaw(theta) - r).abs() <= cfg.orientation_margin {
                    out.orientation.push((orientation_features(&patch, image), class.index()));
                }
            }
        }
    }
    out
}

pub fn labeled_images(frames: &[Rendered]) -> Vec<LabeledImage> {
    frames
        .iter()
        .map(|r| LabeledImage {
            image: r.image.clone(),
            labels: r.tags.iter().map(|t| u8::from(matches!(t, PixelTag::Flower(_)))).collect(),
        })
        .collect()
}

/// Trains all perception models from rendered scenes.
pub fn train_synthetic(
    cfg: &SyntheticTrainingConfig,
    sweep_center: Vector3<f64>,
    k: &CameraIntrinsics,
    noise: &NoiseSpec,
    patch_options: &PatchOptions,
    theta: f64,
) -> Result<(PerceptionModels, PatchDatasets)> {
    let frames = training_frames(cfg, sweep_center, k, noise, theta)?;
    let rendered: Vec<Rendered> = frames.iter().map(|f| f.rendered.clone()).collect();
    let color = train_color_model(&labeled_images(&rendered), &cfg.color)?;
    let lut = build_lut(&color);
    let data = patch_datasets(&frames, &lut, patch_options, cfg, theta);
    let flower = train_reference_classifier(
        &data.flower,
        &TrainConfig {
            num_classes: 2,
            ..cfg.classifier
        },
    )?
    .classifier;
    let orientation = train_reference_classifier(
        &data.orientation,
        &TrainConfig {
            num_classes: 3,
            ..cfg.classifier
        },
    )?
    .classifier;
    Ok((
        PerceptionModels {
            color,
            flower,
            orientation,
        },
        data,
    ))
}

/// Trains the color model and flower classifier from labeled images, with
/// patches labeled by majority vote of the mask. The orientation classifier
/// is supplied separately because masks carry no orientation.
pub fn train_from_labeled(
    images: &[LabeledImage],
    color_opts: &TrainOptions,
    patch_options: &PatchOptions,
    classifier: &TrainConfig,
    orientation: LinearSoftmaxClassifier,
) -> Result<PerceptionModels> {
    let color = train_color_model(images, color_opts)?;
    let lut = build_lut(&color);
    let mut data = Vec::new();
    for sample in images {
        let w = sample.image.width();
        for patch in extract_patches(&segment_image(&lut, &sample.image), patch_options) {
            let on = patch.pixels.iter().filter(|&&(u, v)| sample.labels[v * w + u] != 0).count();
            data.push((patch_features(&patch, &sample.image), usize::from(2 * on >= patch.area)));
        }
    }
    let flower = train_reference_classifier(
        &data,
        &TrainConfig {
            num_classes: 2,
            ..*classifier
        },
    )?
    .classifier;
    Ok(PerceptionModels {
        color,
        flower,
        orientation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn view_azimuth_sign() {
        let f = Vector3::new(0.5, 0.0, 0.4);
        assert!(view_azimuth(&f, &Vector3::new(0.0, 0.0, 0.4)).abs() < 1e-12);
        // a camera on the side a +yaw normal turns toward sees zero relative yaw
        let n = crate::mapping::flower_normal(&f, 0.3);
        let cam = f + n * 0.3;
        assert!((view_azimuth(&f, &cam) - 0.3).abs() < 1e-12);
        assert!(relative_yaw(0.3, &f, &cam).abs() < 1e-12);
    }
}
