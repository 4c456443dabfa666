//! Naive Bayes pixel segmentation.
//!
//! Each pixel is labeled by the MAP rule over per-channel color likelihoods
//! that are assumed independent given the class. Because the classifier only
//! depends on the 24-bit color, it is compiled once into a lookup table and
//! segmentation becomes one table read per pixel.

use std::collections::VecDeque;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::RgbdImage;

pub const BACKGROUND: u8 = 0;
pub const FLOWER: u8 = 1;
pub const NUM_LABELS: usize = 2;
const LABEL_NAMES: [&str; NUM_LABELS] = ["background", "flower"];

/// Pixel count a per-image histogram is rescaled to before the pseudo-count
/// is added (the default 640x480 frame). Makes smoothing independent of the
/// training image resolution.
pub const REFERENCE_PIXELS: f64 = 640.0 * 480.0;

const MODEL_MAGIC: &[u8; 4] = b"PSCM";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    /// Mean per-image pixel fraction of each class.
    PixelFrequency,
    Uniform,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub smoothing: f64,
    pub priors: PriorMode,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            smoothing: 1.0,
            priors: PriorMode::PixelFrequency,
        }
    }
}

/// Per-pixel class labels for a training image (0 = background, nonzero = flower).
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: RgbdImage,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorHistogramModel {
    pub priors: [f64; NUM_LABELS],
    /// `likelihoods[label][channel][intensity]`
    pub likelihoods: Vec<[[f64; 256]; 3]>,
    pub smoothing: f64,
}

/// Fits the color model. Every training image contributes equal weight:
/// its per-class channel histograms are normalized on their own before the
/// images are averaged.
pub fn train_color_model(
    labeled_images: &[LabeledImage],
    opts: &TrainOptions,
) -> Result<ColorHistogramModel> {
    if labeled_images.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if !(opts.smoothing > 0.0) {
        return Err(Error::Config(format!(
            "smoothing pseudo-count must be positive, got {}",
            opts.smoothing
        )));
    }

    let mut sums = vec![[[0.0f64; 256]; 3]; NUM_LABELS];
    let mut contributing = [0usize; NUM_LABELS];
    let mut prior_sum = [0.0f64; NUM_LABELS];

    for sample in labeled_images {
        let img = &sample.image;
        if sample.labels.len() != img.rgb().len() {
            return Err(Error::DimensionMismatch(format!(
                "label mask has {} entries for a {}x{} image",
                sample.labels.len(),
                img.width(),
                img.height()
            )));
        }
        let mut counts = vec![[[0u64; 256]; 3]; NUM_LABELS];
        let mut totals = [0u64; NUM_LABELS];
        for (px, &lab) in img.rgb().iter().zip(&sample.labels) {
            let l = usize::from(lab != 0);
            totals[l] += 1;
            for c in 0..3 {
                counts[l][c][px[c] as usize] += 1;
            }
        }
        let n = (totals[0] + totals[1]) as f64;
        if n == 0.0 {
            return Err(Error::DegenerateDataset("training image has no pixels".into()));
        }
        for l in 0..NUM_LABELS {
            prior_sum[l] += totals[l] as f64 / n;
            if totals[l] == 0 {
                continue;
            }
            contributing[l] += 1;
            let t = totals[l] as f64;
            let denom = REFERENCE_PIXELS + 256.0 * opts.smoothing;
            for c in 0..3 {
                for b in 0..256 {
                    let freq = counts[l][c][b] as f64 / t;
                    sums[l][c][b] += (freq * REFERENCE_PIXELS + opts.smoothing) / denom;
                }
            }
        }
    }

    for l in 0..NUM_LABELS {
        if contributing[l] == 0 {
            return Err(Error::EmptyClass(LABEL_NAMES[l]));
        }
    }

    let mut likelihoods = vec![[[0.0f64; 256]; 3]; NUM_LABELS];
    for l in 0..NUM_LABELS {
        for c in 0..3 {
            let total: f64 = sums[l][c].iter().sum();
            for b in 0..256 {
                likelihoods[l][c][b] = sums[l][c][b] / total;
            }
        }
    }

    let priors = match opts.priors {
        PriorMode::Uniform => [0.5, 0.5],
        PriorMode::PixelFrequency => {
            let s = prior_sum[0] + prior_sum[1];
            let bg = prior_sum[0] / s;
            [bg, 1.0 - bg]
        }
    };

    Ok(ColorHistogramModel {
        priors,
        likelihoods,
        smoothing: opts.smoothing,
    })
}

/// Log-domain score tables, laid out so that the LUT builder and the single
/// pixel classifier sum terms in the same order (bitwise-identical scores).
#[derive(Debug, Clone)]
struct LogTables {
    prior: [f64; NUM_LABELS],
    channel: [[[f64; 256]; 3]; NUM_LABELS],
}

impl LogTables {
    fn new(model: &ColorHistogramModel) -> Self {
        let mut channel = [[[0.0; 256]; 3]; NUM_LABELS];
        for l in 0..NUM_LABELS {
            for c in 0..3 {
                for b in 0..256 {
                    channel[l][c][b] = model.likelihoods[l][c][b].ln();
                }
            }
        }
        Self {
            prior: [model.priors[0].ln(), model.priors[1].ln()],
            channel,
        }
    }
}

impl ColorHistogramModel {
    /// Log posterior up to a shared constant, per label.
    pub fn log_scores(&self, px: [u8; 3]) -> [f64; NUM_LABELS] {
        let score = |l: usize| {
            self.priors[l].ln()
                + self.likelihoods[l][0][px[0] as usize].ln()
                + self.likelihoods[l][1][px[1] as usize].ln()
                + self.likelihoods[l][2][px[2] as usize].ln()
        };
        [score(0), score(1)]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + NUM_LABELS * (8 + 3 * 256 * 8));
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(NUM_LABELS as u32).to_le_bytes());
        buf.extend_from_slice(&self.smoothing.to_le_bytes());
        for p in self.priors {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        for l in &self.likelihoods {
            for ch in l {
                for v in ch {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = ByteReader::new(&bytes);
        if r.take(4).ok_or_else(|| bad("truncated header"))? != MODEL_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != MODEL_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let labels = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        if labels != NUM_LABELS {
            return Err(bad(&format!("expected {NUM_LABELS} labels, found {labels}")));
        }
        let smoothing = r.f64().ok_or_else(|| bad("truncated header"))?;
        let mut priors = [0.0; NUM_LABELS];
        for p in priors.iter_mut() {
            *p = r.f64().ok_or_else(|| bad("truncated priors"))?;
        }
        let mut likelihoods = vec![[[0.0; 256]; 3]; NUM_LABELS];
        for l in likelihoods.iter_mut() {
            for ch in l.iter_mut() {
                for v in ch.iter_mut() {
                    *v = r.f64().ok_or_else(|| bad("truncated likelihoods"))?;
                }
            }
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            priors,
            likelihoods,
            smoothing,
        })
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    pub(crate) fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// MAP label for one color. Ties go to background.
pub fn classify_pixel(model: &ColorHistogramModel, px: [u8; 3]) -> u8 {
    let s = model.log_scores(px);
    if s[1] > s[0] {
        FLOWER
    } else {
        BACKGROUND
    }
}

#[inline]
pub fn pack_rgb(px: [u8; 3]) -> usize {
    ((px[0] as usize) << 16) | ((px[1] as usize) << 8) | px[2] as usize
}

#[inline]
pub fn unpack_rgb(i: usize) -> [u8; 3] {
    [(i >> 16) as u8, (i >> 8) as u8, i as u8]
}

/// Color to label table. With 8 bits per channel it has one entry per
/// 24-bit color; fewer bits give a quantized table whose entries are the
/// labels of the bin centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorLut {
    bits: u32,
    table: Vec<u8>,
}

pub fn build_lut(model: &ColorHistogramModel) -> ColorLut {
    ColorLut::with_bits(model, 8)
}

impl ColorLut {
    pub fn with_bits(model: &ColorHistogramModel, bits: u32) -> Self {
        assert!((1..=8).contains(&bits), "bits per channel must be in 1..=8");
        let t = LogTables::new(model);
        let levels = 1usize << bits;
        let shift = 8 - bits;
        let center = if shift == 0 { 0 } else { 1usize << (shift - 1) };
        let rep = |q: usize| ((q << shift) | center) as u8 as usize;
        let mut table = vec![BACKGROUND; levels * levels * levels];
        let mut i = 0;
        for r in 0..levels {
            let (r0, r1) = (
                t.prior[0] + t.channel[0][0][rep(r)],
                t.prior[1] + t.channel[1][0][rep(r)],
            );
            for g in 0..levels {
                let (g0, g1) = (r0 + t.channel[0][1][rep(g)], r1 + t.channel[1][1][rep(g)]);
                for b in 0..levels {
                    let s0 = g0 + t.channel[0][2][rep(b)];
                    let s1 = g1 + t.channel[1][2][rep(b)];
                    table[i] = if s1 > s0 { FLOWER } else { BACKGROUND };
                    i += 1;
                }
            }
        }
        Self { bits, table }
    }

    pub fn bits_per_channel(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn table(&self) -> &[u8] {
        &self.table
    }

    #[inline]
    pub fn lookup(&self, px: [u8; 3]) -> u8 {
        let s = 8 - self.bits;
        let b = self.bits;
        let i = ((px[0] as usize >> s) << (2 * b)) | ((px[1] as usize >> s) << b) | (px[2] as usize >> s);
        self.table[i]
    }

    pub fn flower_fraction(&self) -> f64 {
        self.table.iter().filter(|&&l| l == FLOWER).count() as f64 / self.table.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: bool) {
        self.data[v * self.width + u] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Labels every pixel with one table read. Depth is not used.
pub fn segment_image(lut: &ColorLut, image: &RgbdImage) -> BinaryMask {
    BinaryMask {
        width: image.width(),
        height: image.height(),
        data: image.rgb().iter().map(|&px| lut.lookup(px) == FLOWER).collect(),
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        u >= self.x0 && u <= self.x1 && v >= self.y0 && v <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRegion {
    /// Component bounds inflated and clipped to the image.
    pub bbox: PixelRect,
    /// Tight bounds of the component pixels.
    pub tight_bbox: PixelRect,
    /// Component pixels as `(u, v)`, in scan order.
    pub pixels: Vec<(usize, usize)>,
    pub centroid: (f64, f64),
    pub area: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PatchOptions {
    pub min_area: usize,
    pub inflation: usize,
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self {
            min_area: 50,
            inflation: 4,
        }
    }
}

/// 8-connected components of the mask with at least `min_area` pixels,
/// largest first.
pub fn extract_patches(mask: &BinaryMask, opts: &PatchOptions) -> Vec<PatchRegion> {
    let (w, h) = (mask.width, mask.height);
    let mut visited = vec![false; w * h];
    let mut patches = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..w * h {
        if !mask.data[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (u, v) = (i % w, i / w);
            pixels.push((u, v));
            for dv in -1i64..=1 {
                for du in -1i64..=1 {
                    if du == 0 && dv == 0 {
                        continue;
                    }
                    let (nu, nv) = (u as i64 + du, v as i64 + dv);
                    if nu < 0 || nv < 0 || nu >= w as i64 || nv >= h as i64 {
                        continue;
                    }
                    let j = nv as usize * w + nu as usize;
                    if mask.data[j] && !visited[j] {
                        visited[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if pixels.len() < opts.min_area {
            continue;
        }
        pixels.sort_by_key(|&(u, v)| (v, u));
        let tight = PixelRect {
            x0: pixels.iter().map(|p| p.0).min().unwrap(),
            y0: pixels.iter().map(|p| p.1).min().unwrap(),
            x1: pixels.iter().map(|p| p.0).max().unwrap(),
            y1: pixels.iter().map(|p| p.1).max().unwrap(),
        };
        let bbox = PixelRect {
            x0: tight.x0.saturating_sub(opts.inflation),
            y0: tight.y0.saturating_sub(opts.inflation),
            x1: (tight.x1 + opts.inflation).min(w - 1),
            y1: (tight.y1 + opts.inflation).min(h - 1),
        };
        let n = pixels.len() as f64;
        let centroid = (
            pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n,
            pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n,
        );
        patches.push(PatchRegion {
            bbox,
            tight_bbox: tight,
            area: pixels.len(),
            pixels,
            centroid,
        });
    }
    // Stable sort keeps scan order among equal areas.
    patches.sort_by(|a, b| b.area.cmp(&a.area));
    patches
}

/// Loads labeled training pairs from `dir`: every `<name>.png` with a
/// sibling `<name>.mask.png` (nonzero mask pixels are flower). Pairs are
/// returned in file-name order.
pub fn load_labeled_dir(dir: &Path) -> Result<Vec<LabeledImage>> {
    let mut scenes: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "png")
                && !p.to_string_lossy().ends_with(".mask.png")
        })
        .collect();
    scenes.sort();
    let mut out = Vec::new();
    for scene in scenes {
        let mask_path = scene.with_extension("mask.png");
        if !mask_path.exists() {
            log::warn!("skipping {}: no mask", scene.display());
            continue;
        }
        let rgb = image::open(&scene)?.to_rgb8();
        let mask = image::open(&mask_path)?.to_luma8();
        if rgb.dimensions() != mask.dimensions() {
            return Err(Error::Format {
                path: mask_path,
                reason: "mask size differs from scene image".into(),
            });
        }
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let pixels = rgb.pixels().map(|p| p.0).collect();
        let labels = mask.pixels().map(|p| u8::from(p.0[0] != 0)).collect();
        out.push(LabeledImage {
            image: RgbdImage::from_parts(w, h, pixels, vec![0.0; w * h])?,
            labels,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    Ok(out)
}

/// Writes a labeled pair in the layout `load_labeled_dir` reads.
pub fn save_labeled_pair(dir: &Path, name: &str, sample: &LabeledImage) -> Result<()> {
    let (w, h) = (sample.image.width() as u32, sample.image.height() as u32);
    let rgb: Vec<u8> = sample.image.rgb().iter().flatten().copied().collect();
    image::RgbImage::from_raw(w, h, rgb)
        .expect("buffer size matches image dimensions")
        .save(dir.join(format!("{name}.png")))?;
    let mask: Vec<u8> = sample.labels.iter().map(|&l| if l != 0 { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(w, h, mask)
        .expect("buffer size matches image dimensions")
        .save(dir.join(format!("{name}.mask.png")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const WHITE: [u8; 3] = [255, 255, 255];
    const GREEN: [u8; 3] = [0, 255, 0];

    fn two_color_image(w: usize, h: usize) -> LabeledImage {
        let mut rgb = Vec::new();
        let mut labels = Vec::new();
        for v in 0..h {
            for _u in 0..w {
                let flower = v < h / 2;
                rgb.push(if flower { WHITE } else { GREEN });
                labels.push(flower as u8);
            }
        }
        LabeledImage {
            image: RgbdImage::from_parts(w, h, rgb, vec![0.0; w * h]).unwrap(),
            labels,
        }
    }

    fn random_labeled(rng: &mut ChaCha8Rng, w: usize, h: usize) -> LabeledImage {
        let mut rgb = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..w * h {
            let flower = rng.random_bool(0.3);
            let px = if flower {
                [rng.random_range(180..=255), rng.random_range(160..=255), rng.random_range(100..=255)]
            } else {
                [rng.random_range(0..=140), rng.random_range(40..=200), rng.random_range(0..=120)]
            };
            rgb.push(px);
            labels.push(flower as u8);
        }
        LabeledImage {
            image: RgbdImage::from_parts(w, h, rgb, vec![0.0; w * h]).unwrap(),
            labels,
        }
    }

    fn upsample(sample: &LabeledImage, f: usize) -> LabeledImage {
        let (w, h) = (sample.image.width(), sample.image.height());
        let mut rgb = Vec::new();
        let mut labels = Vec::new();
        for v in 0..h * f {
            for u in 0..w * f {
                rgb.push(sample.image.color_at(u / f, v / f));
                labels.push(sample.labels[(v / f) * w + u / f]);
            }
        }
        LabeledImage {
            image: RgbdImage::from_parts(w * f, h * f, rgb, vec![0.0; w * h * f * f]).unwrap(),
            labels,
        }
    }

    #[test]
    fn trivial_two_color_model() {
        let m = train_color_model(&[two_color_image(8, 8)], &TrainOptions::default()).unwrap();
        assert!(m.likelihoods[1][0][255] > 0.99);
        assert!(m.likelihoods[0][0][0] > 0.99);
        assert_eq!(classify_pixel(&m, WHITE), FLOWER);
        assert_eq!(classify_pixel(&m, GREEN), BACKGROUND);
        let lut = build_lut(&m);
        assert_eq!(lut.len(), 1 << 24);
        assert_eq!(lut.lookup(WHITE), FLOWER);
        assert_eq!(lut.table()[pack_rgb(WHITE)], FLOWER);
    }

    #[test]
    fn model_distributions_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<_> = (0..3).map(|_| random_labeled(&mut rng, 20, 15)).collect();
        let m = train_color_model(&data, &TrainOptions::default()).unwrap();
        assert!((m.priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for l in &m.likelihoods {
            for ch in l {
                assert!((ch.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(ch.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn empty_class_is_rejected() {
        let mut s = two_color_image(4, 4);
        s.labels.iter_mut().for_each(|l| *l = 0);
        assert!(matches!(
            train_color_model(&[s], &TrainOptions::default()),
            Err(Error::EmptyClass("flower"))
        ));
        assert!(matches!(
            train_color_model(&[], &TrainOptions::default()),
            Err(Error::EmptyTrainingSet)
        ));
    }

    #[test]
    fn resolution_does_not_change_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<_> = (0..3).map(|_| random_labeled(&mut rng, 12, 9)).collect();
        let up2: Vec<_> = data.iter().map(|s| upsample(s, 2)).collect();
        let a = train_color_model(&data, &TrainOptions::default()).unwrap();
        let b = train_color_model(&up2, &TrainOptions::default()).unwrap();
        for l in 0..NUM_LABELS {
            assert!((a.priors[l] - b.priors[l]).abs() < 1e-12);
            for c in 0..3 {
                for k in 0..256 {
                    assert!((a.likelihoods[l][c][k] - b.likelihoods[l][c][k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn model_matches_brute_force_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<_> = (0..2).map(|_| random_labeled(&mut rng, 17, 11)).collect();
        let alpha = 0.5;
        let m = train_color_model(
            &data,
            &TrainOptions {
                smoothing: alpha,
                priors: PriorMode::PixelFrequency,
            },
        )
        .unwrap();

        // Independent recomputation with explicit per-image loops.
        for l in 0..2u8 {
            for c in 0..3 {
                let mut avg = [0.0f64; 256];
                for s in &data {
                    let sel: Vec<[u8; 3]> = s
                        .image
                        .rgb()
                        .iter()
                        .zip(&s.labels)
                        .filter(|(_, &lab)| lab == l)
                        .map(|(p, _)| *p)
                        .collect();
                    for (b, slot) in avg.iter_mut().enumerate() {
                        let n = sel.iter().filter(|p| p[c] as usize == b).count() as f64;
                        let smoothed = (n / sel.len() as f64 * REFERENCE_PIXELS + alpha)
                            / (REFERENCE_PIXELS + 256.0 * alpha);
                        *slot += smoothed / data.len() as f64;
                    }
                }
                let z: f64 = avg.iter().sum();
                for b in 0..256 {
                    assert!((m.likelihoods[l as usize][c][b] - avg[b] / z).abs() < 1e-12);
                }
            }
        }
        let frac: f64 = data
            .iter()
            .map(|s| s.labels.iter().filter(|&&l| l == 1).count() as f64 / s.labels.len() as f64)
            .sum::<f64>()
            / data.len() as f64;
        assert!((m.priors[1] - frac).abs() < 1e-12);
    }

    #[test]
    fn uniform_prior_override() {
        let m = train_color_model(
            &[two_color_image(4, 6)],
            &TrainOptions {
                smoothing: 1.0,
                priors: PriorMode::Uniform,
            },
        )
        .unwrap();
        assert_eq!(m.priors, [0.5, 0.5]);
    }

    #[test]
    fn classify_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<_> = (0..2).map(|_| random_labeled(&mut rng, 30, 20)).collect();
        let m = train_color_model(&data, &TrainOptions::default()).unwrap();
        for _ in 0..10_000 {
            let px = [rng.random(), rng.random(), rng.random()];
            let post = |l: usize| {
                m.priors[l]
                    * m.likelihoods[l][0][px[0] as usize]
                    * m.likelihoods[l][1][px[1] as usize]
                    * m.likelihoods[l][2][px[2] as usize]
            };
            let (p0, p1) = (post(0), post(1));
            // Products of four probabilities this large do not underflow;
            // skip near-ties where rounding could flip the decision.
            if (p1 - p0).abs() <= 1e-12 * p0.max(p1) {
                continue;
            }
            let expected = if p1 > p0 { FLOWER } else { BACKGROUND };
            assert_eq!(classify_pixel(&m, px), expected, "pixel {px:?}");
        }
    }

    #[test]
    fn heavy_smoothing_tends_to_prior_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<_> = (0..2).map(|_| random_labeled(&mut rng, 20, 20)).collect();
        let m = train_color_model(
            &data,
            &TrainOptions {
                smoothing: 1e12,
                priors: PriorMode::PixelFrequency,
            },
        )
        .unwrap();
        // Flower prior is ~0.3, so everything collapses to background.
        for _ in 0..1000 {
            let px = [rng.random(), rng.random(), rng.random()];
            assert_eq!(classify_pixel(&m, px), BACKGROUND);
        }
    }

    #[test]
    fn quantized_lut_agrees_on_bin_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<_> = (0..2).map(|_| random_labeled(&mut rng, 20, 20)).collect();
        let m = train_color_model(&data, &TrainOptions::default()).unwrap();
        let full = build_lut(&m);
        let q = ColorLut::with_bits(&m, 5);
        assert_eq!(q.len(), 1 << 15);
        for _ in 0..5000 {
            let bin = [rng.random_range(0..32u8), rng.random_range(0..32u8), rng.random_range(0..32u8)];
            let rep = [bin[0] * 8 + 4, bin[1] * 8 + 4, bin[2] * 8 + 4];
            assert_eq!(q.lookup(rep), full.lookup(rep));
            // Any color in the bin reads the representative's label.
            let any = [bin[0] * 8 + 7, bin[1] * 8, bin[2] * 8 + 1];
            assert_eq!(q.lookup(any), full.lookup(rep));
        }
    }

    #[test]
    fn uniform_background_segments_empty() {
        let m = train_color_model(&[two_color_image(8, 8)], &TrainOptions::default()).unwrap();
        let lut = build_lut(&m);
        let img = RgbdImage::from_parts(10, 10, vec![GREEN; 100], vec![1.0; 100]).unwrap();
        assert_eq!(segment_image(&lut, &img).count(), 0);
    }

    #[test]
    fn segmentation_ignores_depth() {
        let m = train_color_model(&[two_color_image(8, 8)], &TrainOptions::default()).unwrap();
        let lut = ColorLut::with_bits(&m, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rgb: Vec<[u8; 3]> = (0..64).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let a = RgbdImage::from_parts(8, 8, rgb.clone(), vec![0.0; 64]).unwrap();
        let b = RgbdImage::from_parts(8, 8, rgb, (0..64).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(segment_image(&lut, &a), segment_image(&lut, &b));
    }

    fn blob_mask(w: usize, h: usize, blobs: &[(usize, usize, usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        for &(x, y, bw, bh) in blobs {
            for v in y..y + bh {
                for u in x..x + bw {
                    m.set(u, v, true);
                }
            }
        }
        m
    }

    #[test]
    fn patch_extraction_basics() {
        assert!(extract_patches(&BinaryMask::new(20, 20), &PatchOptions::default()).is_empty());
        let m = blob_mask(60, 40, &[(2, 2, 10, 10), (30, 20, 20, 5)]);
        let p = extract_patches(&m, &PatchOptions { min_area: 50, inflation: 4 });
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].area, 100);
        assert_eq!(p[1].area, 100);
        // Inflated and clipped at the image border.
        assert_eq!(p[0].bbox, PixelRect { x0: 0, y0: 0, x1: 15, y1: 15 });
        assert_eq!(p[0].tight_bbox, PixelRect { x0: 2, y0: 2, x1: 11, y1: 11 });
        assert_eq!(p[0].centroid, (6.5, 6.5));
        assert!(p.iter().all(|r| r.pixels.iter().all(|&(u, v)| r.bbox.contains(u, v))));
    }

    #[test]
    fn diagonal_pixels_join_and_small_blobs_drop() {
        let mut m = BinaryMask::new(10, 10);
        for i in 0..10 {
            m.set(i, i, true);
        }
        let p = extract_patches(&m, &PatchOptions { min_area: 10, inflation: 0 });
        assert_eq!(p.len(), 1);
        let p = extract_patches(&m, &PatchOptions { min_area: 11, inflation: 0 });
        assert!(p.is_empty());
    }

    /// Recursive flood fill used only as an oracle.
    fn oracle_components(m: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
        let mut label = vec![usize::MAX; m.data.len()];
        let mut comps: Vec<Vec<(usize, usize)>> = Vec::new();
        fn fill(m: &BinaryMask, label: &mut [usize], u: i64, v: i64, id: usize, out: &mut Vec<(usize, usize)>) {
            if u < 0 || v < 0 || u >= m.width as i64 || v >= m.height as i64 {
                return;
            }
            let i = v as usize * m.width + u as usize;
            if !m.data[i] || label[i] != usize::MAX {
                return;
            }
            label[i] = id;
            out.push((u as usize, v as usize));
            for dv in -1..=1 {
                for du in -1..=1 {
                    fill(m, label, u + du, v + dv, id, out);
                }
            }
        }
        for v in 0..m.height {
            for u in 0..m.width {
                let i = v * m.width + u;
                if m.data[i] && label[i] == usize::MAX {
                    let mut c = Vec::new();
                    fill(m, &mut label, u as i64, v as i64, comps.len(), &mut c);
                    c.sort_by_key(|&(u, v)| (v, u));
                    comps.push(c);
                }
            }
        }
        comps
    }

    #[test]
    fn components_match_flood_fill_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut m = BinaryMask::new(40, 30);
            for d in m.data.iter_mut() {
                *d = rng.random_bool(0.45);
            }
            let min_area = 5;
            let mut expected: Vec<_> = oracle_components(&m)
                .into_iter()
                .filter(|c| c.len() >= min_area)
                .collect();
            expected.sort();
            let mut got: Vec<_> = extract_patches(&m, &PatchOptions { min_area, inflation: 2 })
                .into_iter()
                .map(|p| p.pixels)
                .collect();
            got.sort();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn model_persistence_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = train_color_model(&[random_labeled(&mut rng, 10, 10)], &TrainOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        m.save(&path).unwrap();
        assert_eq!(ColorHistogramModel::load(&path).unwrap(), m);
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(ColorHistogramModel::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn labeled_directory_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        save_labeled_pair(dir.path(), "a", &two_color_image(6, 4)).unwrap();
        save_labeled_pair(dir.path(), "b", &two_color_image(3, 8)).unwrap();
        let data = load_labeled_dir(dir.path()).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data[0].labels, two_color_image(6, 4).labels);
        let m = train_color_model(&data, &TrainOptions::default()).unwrap();
        assert_eq!(classify_pixel(&m, WHITE), FLOWER);
    }
}
