//! Patch classification: flower vs. non-flower, and the three-way flower
//! orientation relative to the observing camera.
//!
//! Any model implementing [`PatchClassifier`] can be dropped in. The
//! reference model is a single linear layer with a softmax output trained by
//! full-batch gradient descent on the cross-entropy loss, whose gradient with
//! respect to the logits is simply `p - q`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::RgbdImage;
use crate::segmentation::{ByteReader, PatchRegion};

/// Label used by the binary patch classifier.
pub const NON_FLOWER: usize = 0;
pub const FLOWER: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    /// Validates and wraps a probability vector.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("not a probability vector: {p:?}")));
        }
        Ok(Self(p))
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(w: Vec<f64>) -> Result<Self> {
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0) || w.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Config(format!("weights cannot be normalized: {w:?}")));
        }
        Ok(Self(w.into_iter().map(|x| x / sum).collect()))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        let mut p = vec![0.0; k];
        p[class] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most probable class; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Softmax with max-subtraction.
pub fn softmax(z: &[f64]) -> ClassDistribution {
    assert!(z.iter().all(|v| v.is_finite()), "logits must be finite");
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    ClassDistribution(e.into_iter().map(|v| v / s).collect())
}

pub fn cross_entropy_loss(p: &ClassDistribution, q: &ClassDistribution) -> f64 {
    -p.0
        .iter()
        .zip(&q.0)
        .map(|(&pk, &qk)| pk.max(1e-300).ln() * qk)
        .sum::<f64>()
}

/// Derivative of the cross-entropy loss with respect to the logits.
pub fn loss_gradient(p: &ClassDistribution, q: &ClassDistribution) -> Vec<f64> {
    p.0.iter().zip(&q.0).map(|(pk, qk)| pk - qk).collect()
}

pub trait PatchClassifier: Send + Sync {
    fn num_classes(&self) -> usize;
    fn num_features(&self) -> usize;
    fn classify(&self, features: &[f64]) -> ClassDistribution;
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxClassifier {
    /// `K x D`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub feature_mean: DVector<f64>,
    pub feature_scale: DVector<f64>,
}

const CLASSIFIER_MAGIC: &[u8; 4] = b"PSLC";
const CLASSIFIER_VERSION: u32 = 1;

impl LinearSoftmaxClassifier {
    /// All-zero model: every input maps to the uniform distribution.
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            weights: DMatrix::zeros(classes, features),
            bias: DVector::zeros(classes),
            feature_mean: DVector::zeros(features),
            feature_scale: DVector::from_element(features, 1.0),
        }
    }

    fn standardize(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - self.feature_mean[i]) / self.feature_scale[i]),
        )
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        let x = self.standardize(features);
        (&self.weights * x + &self.bias).iter().copied().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (k, d) = self.weights.shape();
        let mut buf = Vec::new();
        buf.extend_from_slice(CLASSIFIER_MAGIC);
        buf.extend_from_slice(&CLASSIFIER_VERSION.to_le_bytes());
        buf.extend_from_slice(&(k as u32).to_le_bytes());
        buf.extend_from_slice(&(d as u32).to_le_bytes());
        let mut put = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
        self.feature_mean.iter().for_each(|&v| put(v));
        self.feature_scale.iter().for_each(|&v| put(v));
        for r in 0..k {
            for c in 0..d {
                put(self.weights[(r, c)]);
            }
        }
        self.bias.iter().for_each(|&v| put(v));
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = ByteReader::new(&bytes);
        if r.take(4) != Some(CLASSIFIER_MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        if r.u32() != Some(CLASSIFIER_VERSION) {
            return Err(bad("unsupported version"));
        }
        let k = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let d = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut read = |n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| r.f64().ok_or_else(|| bad("truncated parameters")))
                .collect()
        };
        let mean = read(d)?;
        let scale = read(d)?;
        let w = read(k * d)?;
        let b = read(k)?;
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            weights: DMatrix::from_row_slice(k, d, &w),
            bias: DVector::from_vec(b),
            feature_mean: DVector::from_vec(mean),
            feature_scale: DVector::from_vec(scale),
        })
    }
}

impl PatchClassifier for LinearSoftmaxClassifier {
    fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    fn num_features(&self) -> usize {
        self.weights.ncols()
    }

    fn classify(&self, features: &[f64]) -> ClassDistribution {
        softmax(&self.logits(features))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub num_classes: usize,
    pub epochs: usize,
    /// Full-batch step size. With standardized features the loss is
    /// `(D + 1) / 2`-smooth, so any rate up to `2 / (D + 1)` decreases the
    /// training loss every epoch; the default 0.1 is safe for up to 19
    /// features.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            epochs: 500,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub classifier: LinearSoftmaxClassifier,
    /// Mean training loss before each epoch's update, then once at the end.
    pub loss_history: Vec<f64>,
}

/// Fits the reference classifier. Fails unless at least two classes occur
/// and every label is below `num_classes`.
pub fn train_reference_classifier(
    dataset: &[(Vec<f64>, usize)],
    cfg: &TrainConfig,
) -> Result<TrainingOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut present = vec![false; cfg.num_classes];
    for (_, y) in dataset {
        if *y >= cfg.num_classes {
            return Err(Error::DegenerateDataset(format!(
                "label {y} out of range for {} classes",
                cfg.num_classes
            )));
        }
        present[*y] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::DegenerateDataset(format!("class {missing} has no examples")));
    }
    fit_linear_softmax(dataset, cfg)
}

/// Gradient-descent engine behind [`train_reference_classifier`], without
/// the class-coverage check.
pub fn fit_linear_softmax(dataset: &[(Vec<f64>, usize)], cfg: &TrainConfig) -> Result<TrainingOutcome> {
    let n = dataset.len();
    let d = dataset.first().map(|s| s.0.len()).ok_or(Error::EmptyTrainingSet)?;
    let k = cfg.num_classes;
    if dataset.iter().any(|(x, _)| x.len() != d || x.iter().any(|v| !v.is_finite())) {
        return Err(Error::DegenerateDataset(
            "features must be finite and of equal length".into(),
        ));
    }

    let mut mean: DVector<f64> = DVector::zeros(d);
    for (x, _) in dataset {
        for j in 0..d {
            mean[j] += x[j];
        }
    }
    mean /= n as f64;
    let mut scale: DVector<f64> = DVector::zeros(d);
    for (x, _) in dataset {
        for j in 0..d {
            scale[j] += (x[j] - mean[j]).powi(2);
        }
    }
    for j in 0..d {
        let s = (scale[j] / n as f64).sqrt();
        scale[j] = if s > 1e-12 { s } else { 1.0 };
    }

    // Design matrix with a trailing bias column, N x (D + 1).
    let mut x = DMatrix::zeros(n, d + 1);
    for (i, (f, _)) in dataset.iter().enumerate() {
        for j in 0..d {
            x[(i, j)] = (f[j] - mean[j]) / scale[j];
        }
        x[(i, d)] = 1.0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut theta = DMatrix::from_fn(k, d + 1, |_, c| if c == d { 0.0 } else { init.sample(&mut rng) });

    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let logits = &x * theta.transpose(); // N x K
        let mut grad_z = DMatrix::zeros(n, k);
        let mut loss = 0.0;
        for i in 0..n {
            let z: Vec<f64> = logits.row(i).iter().copied().collect();
            let p = softmax(&z);
            let q = ClassDistribution::one_hot(k, dataset[i].1);
            loss += cross_entropy_loss(&p, &q);
            for (c, g) in loss_gradient(&p, &q).into_iter().enumerate() {
                grad_z[(i, c)] = g;
            }
        }
        history.push(loss / n as f64);
        if epoch == cfg.epochs {
            break;
        }
        let grad = grad_z.transpose() * &x / n as f64; // K x (D + 1)
        theta -= grad * cfg.learning_rate;
    }

    Ok(TrainingOutcome {
        classifier: LinearSoftmaxClassifier {
            weights: theta.columns(0, d).into_owned(),
            bias: theta.column(d).into_owned(),
            feature_mean: mean,
            feature_scale: scale,
        },
        loss_history: history,
    })
}

/// Number of values produced by [`patch_features`].
pub const PATCH_FEATURES: usize = 9;
/// Number of values produced by [`orientation_features`].
pub const ORIENTATION_FEATURES: usize = PATCH_FEATURES + 6;

/// Fixed feature recipe over the (inflated) rectangular patch:
/// per-channel mean and standard deviation of the raw colors (scaled to
/// [0, 1]), natural log of the component area, aspect ratio (width/height of
/// the component bounds) and fill ratio (area / bounds area).
pub fn patch_features(patch: &PatchRegion, image: &RgbdImage) -> Vec<f64> {
    let r = patch.bbox;
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0.0;
    for v in r.y0..=r.y1 {
        for u in r.x0..=r.x1 {
            let px = image.color_at(u, v);
            for c in 0..3 {
                let x = px[c] as f64 / 255.0;
                sum[c] += x;
                sq[c] += x * x;
            }
            n += 1.0;
        }
    }
    let mut f = Vec::with_capacity(ORIENTATION_FEATURES);
    for c in 0..3 {
        f.push(sum[c] / n);
    }
    for c in 0..3 {
        let m = sum[c] / n;
        f.push((sq[c] / n - m * m).max(0.0).sqrt());
    }
    let t = patch.tight_bbox;
    f.push((patch.area as f64).ln());
    f.push(t.width() as f64 / t.height() as f64);
    f.push(patch.area as f64 / (t.width() * t.height()) as f64);
    f
}

/// [`patch_features`] plus, for each color channel, the intensity-weighted
/// centroid offset from the patch center along u and v, normalized by the
/// patch width and height. A flower's raised center shifts these moments
/// toward the side the flower faces.
pub fn orientation_features(patch: &PatchRegion, image: &RgbdImage) -> Vec<f64> {
    let mut f = patch_features(patch, image);
    let r = patch.bbox;
    let cu = (r.x0 + r.x1) as f64 / 2.0;
    let cv = (r.y0 + r.y1) as f64 / 2.0;
    let (w, h) = (r.width() as f64, r.height() as f64);
    let mut mass = [0.0f64; 3];
    let mut mu = [0.0f64; 3];
    let mut mv = [0.0f64; 3];
    for v in r.y0..=r.y1 {
        for u in r.x0..=r.x1 {
            let px = image.color_at(u, v);
            for c in 0..3 {
                let i = px[c] as f64;
                mass[c] += i;
                mu[c] += i * (u as f64 - cu);
                mv[c] += i * (v as f64 - cv);
            }
        }
    }
    for c in 0..3 {
        let m = mass[c].max(1e-9);
        f.push(mu[c] / m / w);
        f.push(mv[c] / m / h);
    }
    f
}

/// Returns the winning label (ties go to non-flower) and its probability.
pub fn classify_patch(
    classifier: &dyn PatchClassifier,
    patch: &PatchRegion,
    image: &RgbdImage,
) -> (usize, f64) {
    let p = classifier.classify(&patch_features(patch, image));
    let label = p.argmax();
    (label, p.probs()[label])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OrientationClass {
    /// Facing the camera.
    C1,
    /// Facing the camera's left.
    C2,
    /// Facing the camera's right.
    C3,
}

impl OrientationClass {
    pub const ALL: [OrientationClass; 3] = [Self::C1, Self::C2, Self::C3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    /// Yaw of the flower normal relative to the camera-facing direction.
    /// Positive yaw turns the normal toward the camera's left.
    pub fn yaw(self, theta: f64) -> f64 {
        match self {
            Self::C1 => 0.0,
            Self::C2 => theta,
            Self::C3 => -theta,
        }
    }

    /// Class whose yaw is nearest to `yaw`.
    pub fn nearest(yaw: f64, theta: f64) -> Self {
        Self::ALL
            .into_iter()
            .min_by(|a, b| {
                (a.yaw(theta) - yaw)
                    .abs()
                    .total_cmp(&(b.yaw(theta) - yaw).abs())
            })
            .expect("non-empty")
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::C1 => "C1",
            Self::C2 => "C2",
            Self::C3 => "C3",
        }
    }
}

/// Default orientation class yaw magnitude.
pub const DEFAULT_ORIENTATION_YAW: f64 = 30.0 * std::f64::consts::PI / 180.0;

pub fn classify_orientation(
    classifier: &dyn PatchClassifier,
    patch: &PatchRegion,
    image: &RgbdImage,
) -> (OrientationClass, ClassDistribution) {
    let p = classifier.classify(&orientation_features(patch, image));
    (OrientationClass::from_index(p.argmax()), p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Number of examples whose actual class is this one.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationMetrics {
    /// `confusion[actual][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
}

pub fn compute_metrics(predictions: &[(usize, usize)], num_classes: usize) -> ClassificationMetrics {
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for &(pred, actual) in predictions {
        confusion[actual][pred] += 1;
    }
    let per_class = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: usize = (0..num_classes).map(|a| confusion[a][c]).sum();
            let actual: usize = confusion[c].iter().sum();
            ClassMetrics {
                precision: (predicted > 0).then(|| tp as f64 / predicted as f64),
                recall: (actual > 0).then(|| tp as f64 / actual as f64),
                support: actual,
            }
        })
        .collect();
    ClassificationMetrics {
        confusion,
        per_class,
    }
}

impl ClassificationMetrics {
    pub fn accuracy(&self) -> f64 {
        let total: usize = self.confusion.iter().flatten().sum();
        let correct: usize = (0..self.confusion.len()).map(|c| self.confusion[c][c]).sum();
        correct as f64 / total.max(1) as f64
    }

    /// `class,precision,recall,support`; undefined values are left empty.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut s = String::from("class,precision,recall,support\n");
        for (m, name) in self.per_class.iter().zip(names) {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{name},{},{},{}", fmt(m.precision), fmt(m.recall), m.support);
        }
        s
    }

    pub fn to_table(&self, names: &[&str]) -> String {
        let mut s = format!("{:<12}{:>11}{:>11}{:>9}\n", "class", "precision", "recall", "support");
        for (m, name) in self.per_class.iter().zip(names) {
            let fmt = |v: Option<f64>| v.map(|x| format!("{:.1}%", 100.0 * x)).unwrap_or("-".into());
            let _ = writeln!(
                s,
                "{:<12}{:>11}{:>11}{:>9}",
                name,
                fmt(m.precision),
                fmt(m.recall),
                m.support
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dist(v: &[f64]) -> ClassDistribution {
        ClassDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).probs(), &[0.5, 0.5]);
        for c in [-50.0, 0.0, 3.3, 700.0] {
            let p = softmax(&[c, c, c]);
            assert!(p.probs().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        }
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p.probs()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.probs()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((p.probs()[0] - 1.0).abs() < 1e-15);
        assert!(p.probs().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cross_entropy_examples() {
        let one = dist(&[1.0, 0.0]);
        assert_eq!(cross_entropy_loss(&one, &one), 0.0);
        let half = dist(&[0.5, 0.5]);
        assert!((cross_entropy_loss(&half, &one) - 2f64.ln()).abs() < 1e-15);
        // Zero probability on the true class is clamped, not infinite.
        let l = cross_entropy_loss(&dist(&[0.0, 1.0]), &one);
        assert!(l.is_finite() && l > 600.0);
    }

    #[test]
    fn cross_entropy_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let k = rng.random_range(2..6);
            let p = ClassDistribution::from_weights((0..k).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap();
            let q = ClassDistribution::from_weights((0..k).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let mut oracle = 0.0;
            for i in 0..k {
                oracle -= q.probs()[i] * p.probs()[i].ln();
            }
            assert!((cross_entropy_loss(&p, &q) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_examples() {
        let p = dist(&[0.7, 0.3]);
        assert_eq!(loss_gradient(&p, &p), vec![0.0, 0.0]);
        let g = loss_gradient(&p, &dist(&[1.0, 0.0]));
        assert!((g[0] + 0.3).abs() < 1e-15 && (g[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_model_ties_to_first_class() {
        let c = LinearSoftmaxClassifier::zeros(2, PATCH_FEATURES);
        let p = c.classify(&[0.3; PATCH_FEATURES]);
        assert_eq!(p.probs(), &[0.5, 0.5]);
        assert_eq!(p.argmax(), NON_FLOWER);
        let c3 = LinearSoftmaxClassifier::zeros(3, ORIENTATION_FEATURES);
        let p = c3.classify(&[1.0; ORIENTATION_FEATURES]);
        assert!(p.probs().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(OrientationClass::from_index(p.argmax()), OrientationClass::C1);
    }

    fn separable(n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| loop {
                let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s = 2.0 * x[0] - x[1] + 0.5 * x[2];
                if s.abs() > 0.1 {
                    break (x, usize::from(s > 0.0));
                }
            })
            .collect()
    }

    #[test]
    fn separable_training_reaches_high_accuracy() {
        let data = separable(400, 2);
        let out = train_reference_classifier(&data, &TrainConfig::default()).unwrap();
        let correct = data
            .iter()
            .filter(|(x, y)| out.classifier.classify(x).argmax() == *y)
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.99, "{correct}/400");
        // Loss never increases at the documented step size.
        for w in out.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable(100, 3);
        let cfg = TrainConfig { seed: 42, epochs: 50, ..Default::default() };
        let a = train_reference_classifier(&data, &cfg).unwrap().classifier;
        let b = train_reference_classifier(&data, &cfg).unwrap().classifier;
        assert_eq!(a, b);
    }

    #[test]
    fn missing_class_is_degenerate() {
        let data = vec![(vec![1.0, 2.0], 1usize); 5];
        assert!(matches!(
            train_reference_classifier(&data, &TrainConfig::default()),
            Err(Error::DegenerateDataset(_))
        ));
    }

    #[test]
    fn single_repeated_example_is_fit() {
        let data = vec![(vec![0.2, -1.0, 3.0], 1usize); 10];
        let out = fit_linear_softmax(&data, &TrainConfig { epochs: 2000, learning_rate: 0.1, ..Default::default() })
            .unwrap();
        let p = out.classifier.classify(&data[0].0);
        assert!(p.probs()[1] > 0.99);
        assert!(*out.loss_history.last().unwrap() < 0.01);
    }

    #[test]
    fn classifier_persistence_round_trip() {
        let out = train_reference_classifier(&separable(50, 4), &TrainConfig { epochs: 5, ..Default::default() })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        out.classifier.save(&path).unwrap();
        assert_eq!(LinearSoftmaxClassifier::load(&path).unwrap(), out.classifier);
    }

    #[test]
    fn metrics_table_one_flower_row() {
        // Counts consistent with 78.6% precision / 90.0% recall on 2,102
        // positives and 2,124 negatives.
        let (tp, fn_, fp, tn) = (1892, 210, 515, 1609);
        let mut preds = Vec::new();
        preds.extend(std::iter::repeat_n((FLOWER, FLOWER), tp));
        preds.extend(std::iter::repeat_n((NON_FLOWER, FLOWER), fn_));
        preds.extend(std::iter::repeat_n((FLOWER, NON_FLOWER), fp));
        preds.extend(std::iter::repeat_n((NON_FLOWER, NON_FLOWER), tn));
        let m = compute_metrics(&preds, 2);
        let pos = &m.per_class[FLOWER];
        assert_eq!(pos.support, 2102);
        assert_eq!(format!("{:.1}", 100.0 * pos.precision.unwrap()), "78.6");
        assert_eq!(format!("{:.1}", 100.0 * pos.recall.unwrap()), "90.0");
        let neg = &m.per_class[NON_FLOWER];
        assert_eq!(format!("{:.1}", 100.0 * neg.precision.unwrap()), "88.5");
        assert_eq!(format!("{:.1}", 100.0 * neg.recall.unwrap()), "75.8");
    }

    #[test]
    fn metrics_three_class_by_hand() {
        // actual C1: 5 -> C1, 1 -> C2; actual C2: 2 -> C2, 2 -> C3; actual C3: 3 -> C3, 1 -> C1
        let mut preds = Vec::new();
        preds.extend(std::iter::repeat_n((0, 0), 5));
        preds.push((1, 0));
        preds.extend(std::iter::repeat_n((1, 1), 2));
        preds.extend(std::iter::repeat_n((2, 1), 2));
        preds.extend(std::iter::repeat_n((2, 2), 3));
        preds.push((0, 2));
        let m = compute_metrics(&preds, 3);
        let p: Vec<f64> = m.per_class.iter().map(|c| c.precision.unwrap()).collect();
        let r: Vec<f64> = m.per_class.iter().map(|c| c.recall.unwrap()).collect();
        assert_eq!(p, vec![5.0 / 6.0, 2.0 / 3.0, 3.0 / 5.0]);
        assert_eq!(r, vec![5.0 / 6.0, 2.0 / 4.0, 3.0 / 4.0]);
    }

    #[test]
    fn metrics_all_correct_and_undefined() {
        let m = compute_metrics(&[(0, 0), (1, 1), (1, 1)], 3);
        assert_eq!(m.per_class[0].precision, Some(1.0));
        assert_eq!(m.per_class[1].recall, Some(1.0));
        assert_eq!(m.per_class[2].precision, None);
        assert_eq!(m.per_class[2].recall, None);
        let csv = m.to_csv(&["C1", "C2", "C3"]);
        assert!(csv.lines().nth(3).unwrap() == "C3,,,0");
        assert!(m.to_table(&["C1", "C2", "C3"]).contains("100.0%"));
    }

    #[test]
    fn orientation_class_yaws() {
        let t = DEFAULT_ORIENTATION_YAW;
        assert_eq!(OrientationClass::C1.yaw(t), 0.0);
        assert_eq!(OrientationClass::C2.yaw(t), t);
        assert_eq!(OrientationClass::C3.yaw(t), -t);
        assert_eq!(OrientationClass::nearest(0.4, t), OrientationClass::C2);
        assert_eq!(OrientationClass::nearest(-0.1, t), OrientationClass::C1);
    }
}
