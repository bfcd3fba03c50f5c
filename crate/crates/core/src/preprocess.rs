//! Intensity normalisation, resampling, augmentation and patch extraction.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CatsError, Result};
use crate::registry::Registry;
use crate::volume::{Grid3, IntensityUnits, LabelVolume, Volume};

/// Where the clipping window comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum IntensityWindow {
    /// Fixed bounds (HU for CT).
    Fixed { lo: f64, hi: f64 },
    /// Per-volume percentiles, in percent (MR).
    Percentile { lo: f64, hi: f64 },
}

impl Default for IntensityWindow {
    fn default() -> Self {
        IntensityWindow::Fixed { lo: -175.0, hi: 250.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub window: IntensityWindow,
    pub target_spacing: Option<[f64; 3]>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { window: IntensityWindow::default(), target_spacing: None }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = match self.window {
            IntensityWindow::Fixed { lo, hi } => (lo, hi),
            IntensityWindow::Percentile { lo, hi } => {
                if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) {
                    return Err(CatsError::config("preprocess.window", "percentiles must lie in [0, 100]"));
                }
                (lo, hi)
            }
        };
        if !(lo < hi) {
            return Err(CatsError::config("preprocess.window", format!("lower bound {} must be below upper {}", lo, hi)));
        }
        if let Some(s) = self.target_spacing {
            if s.iter().any(|&v| !(v > 0.0)) {
                return Err(CatsError::config("preprocess.target_spacing", "spacing must be positive"));
            }
        }
        Ok(())
    }

    /// Normalise intensities to [0, 1] and optionally resample.
    pub fn apply(&self, image: &Volume, label: Option<&LabelVolume>) -> Result<(Volume, Option<LabelVolume>)> {
        let (lo, hi) = match self.window {
            IntensityWindow::Fixed { lo, hi } => (lo, hi),
            IntensityWindow::Percentile { lo, hi } => percentile_window(image, lo, hi),
        };
        let mut image = clip_and_normalize(image, lo, hi);
        let mut label = label.cloned();
        if let Some(target) = self.target_spacing {
            image = resample(&image, target)?;
            label = label.map(|l| resample_labels(&l, target)).transpose()?;
        }
        Ok((image, label))
    }
}

/// Check patch extents against the model's divisibility requirements.
pub fn check_patch(patch: [usize; 3], multiple: usize) -> Result<()> {
    if let Some(&bad) = patch.iter().find(|&&e| e == 0 || e % multiple != 0) {
        return Err(CatsError::config("patch", format!("extent {} is not a positive multiple of {}", bad, multiple)));
    }
    Ok(())
}

/// Clamp to `[lo, hi]` and map affinely so `lo -> 0`, `hi -> 1`.
pub fn clip_and_normalize(volume: &Volume, lo: f64, hi: f64) -> Volume {
    let scale = 1.0 / (hi - lo);
    let data = volume.data.map(|v| ((v as f64).clamp(lo, hi) - lo) * scale).map(|v| v as f32);
    let mut out = volume.clone();
    out.data = data;
    out.units = IntensityUnits::Normalized;
    out
}

/// Intensity bounds at the given percentiles (in percent) of the volume.
pub fn percentile_window(volume: &Volume, lo: f64, hi: f64) -> (f64, f64) {
    let values: Vec<f64> = volume.data.data().iter().map(|&v| v as f64).collect();
    let a = crate::metrics::percentile(&values, lo / 100.0);
    let b = crate::metrics::percentile(&values, hi / 100.0);
    if b > a {
        (a, b)
    } else {
        (a, a + 1.0)
    }
}

fn resampled_extents(dims: [usize; 3], from: [f64; 3], to: [f64; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if !(to[a] > 0.0) {
            return Err(CatsError::config("target_spacing", "spacing must be positive"));
        }
        let n = (dims[a] as f64 * from[a] / to[a]).round();
        if n < 1.0 {
            return Err(CatsError::Data(format!("resampling axis {} to {} mm leaves no voxels", a, to[a])));
        }
        out[a] = n as usize;
    }
    Ok(out)
}

/// Source coordinate of output index `i`: voxel 0 stays at the origin; clamped to the grid.
fn source_coord(i: usize, from: f64, to: f64, n: usize) -> f64 {
    (i as f64 * to / from).clamp(0.0, (n - 1) as f64)
}

fn rescaled_affine(affine: &crate::volume::Affine, from: [f64; 3], to: [f64; 3]) -> crate::volume::Affine {
    let mut a = *affine;
    for row in a.iter_mut().take(3) {
        for c in 0..3 {
            row[c] *= to[c] / from[c];
        }
    }
    a
}

/// Trilinear resampling to `target` spacing.
pub fn resample(volume: &Volume, target: [f64; 3]) -> Result<Volume> {
    let from = volume.spacing();
    if from == target {
        return Ok(volume.clone());
    }
    let dims = volume.dims();
    let out_dims = resampled_extents(dims, from, target)?;
    let src = &volume.data;
    let axis = |a: usize, i: usize| {
        let x = source_coord(i, from[a], target[a], dims[a]);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(dims[a] - 1);
        (lo, hi, x - lo as f64)
    };
    let data = Grid3::from_fn(out_dims, |w, h, d| {
        let (cw, ch, cd) = (axis(0, w), axis(1, h), axis(2, d));
        let mut acc = 0.0;
        for (iw, fw) in [(cw.0, 1.0 - cw.2), (cw.1, cw.2)] {
            for (ih, fh) in [(ch.0, 1.0 - ch.2), (ch.1, ch.2)] {
                for (id, fd) in [(cd.0, 1.0 - cd.2), (cd.1, cd.2)] {
                    let weight = fw * fh * fd;
                    if weight != 0.0 {
                        acc += weight * src.get(iw, ih, id) as f64;
                    }
                }
            }
        }
        acc as f32
    });
    Volume::new(data, target, rescaled_affine(volume.affine(), from, target), volume.units)
}

/// Nearest-neighbour resampling of a label map to `target` spacing.
pub fn resample_labels(labels: &LabelVolume, target: [f64; 3]) -> Result<LabelVolume> {
    let from = labels.spacing();
    if from == target {
        return Ok(labels.clone());
    }
    let dims = labels.dims();
    let out_dims = resampled_extents(dims, from, target)?;
    let near = |a: usize, i: usize| source_coord(i, from[a], target[a], dims[a]).round() as usize;
    let data = Grid3::from_fn(out_dims, |w, h, d| labels.data.get(near(0, w), near(1, h), near(2, d)));
    LabelVolume::new(data, labels.num_classes(), target, rescaled_affine(labels.affine(), from, target))
}

/// An image grid and its label grid, transformed together.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Grid3<f32>,
    pub label: Grid3<u16>,
}

impl Sample {
    pub fn new(image: Grid3<f32>, label: Grid3<u16>) -> Result<Self> {
        if image.dims() != label.dims() {
            return Err(CatsError::Data(format!(
                "image extents {:?} differ from label extents {:?}",
                image.dims(),
                label.dims()
            )));
        }
        Ok(Self { image, label })
    }
}

fn remap<T: Copy>(g: &Grid3<T>, dims: [usize; 3], src: impl Fn(usize, usize, usize) -> [usize; 3]) -> Grid3<T> {
    Grid3::from_fn(dims, |w, h, d| {
        let [a, b, c] = src(w, h, d);
        g.get(a, b, c)
    })
}

pub fn flip(sample: &Sample, axis: usize) -> Sample {
    let dims = sample.image.dims();
    let src = move |w: usize, h: usize, d: usize| {
        let mut c = [w, h, d];
        c[axis] = dims[axis] - 1 - c[axis];
        c
    };
    Sample { image: remap(&sample.image, dims, src), label: remap(&sample.label, dims, src) }
}

/// Rotate by `quarter_turns` x 90 degrees in the W-H plane (about the D axis).
pub fn rotate90(sample: &Sample, quarter_turns: usize) -> Sample {
    let mut s = sample.clone();
    for _ in 0..quarter_turns % 4 {
        let [nw, nh, nd] = s.image.dims();
        let dims = [nh, nw, nd];
        let src = move |w: usize, h: usize, d: usize| [h, nh - 1 - w, d];
        s = Sample { image: remap(&s.image, dims, src), label: remap(&s.label, dims, src) };
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Names of the augmentations to apply, in order.
    pub pipeline: Vec<String>,
    pub flip_prob: f64,
    /// Allowed quarter turns about the through-plane axis.
    pub rotations: Vec<usize>,
    /// Bound of the additive intensity offset.
    pub intensity_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pipeline: vec!["flip".into(), "rotate90".into(), "intensity_shift".into()],
            flip_prob: 0.5,
            rotations: vec![0, 1, 2, 3],
            intensity_shift: 0.1,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn none() -> Self {
        Self { pipeline: Vec::new(), flip_prob: 0.0, rotations: vec![0], intensity_shift: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(CatsError::config("augment.flip_prob", "must lie in [0, 1]"));
        }
        if !(self.intensity_shift >= 0.0) {
            return Err(CatsError::config("augment.intensity_shift", "must be non-negative"));
        }
        if self.rotations.is_empty() || self.rotations.iter().any(|&r| r > 3) {
            return Err(CatsError::config("augment.rotations", "quarter turns must be a non-empty subset of 0..=3"));
        }
        let registry = augmentation_registry();
        for name in &self.pipeline {
            registry.get(name)?;
        }
        Ok(())
    }
}

/// One stochastic transform of an image/label pair.
pub trait Augmentation: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, sample: Sample, rng: &mut dyn rand::RngCore) -> Sample;
}

struct RandomFlip(f64);

impl Augmentation for RandomFlip {
    fn name(&self) -> &'static str {
        "flip"
    }

    fn apply(&self, mut sample: Sample, rng: &mut dyn rand::RngCore) -> Sample {
        for axis in 0..3 {
            if rng.random::<f64>() < self.0 {
                sample = flip(&sample, axis);
            }
        }
        sample
    }
}

struct RandomRotate90(Vec<usize>);

impl Augmentation for RandomRotate90 {
    fn name(&self) -> &'static str {
        "rotate90"
    }

    fn apply(&self, sample: Sample, rng: &mut dyn rand::RngCore) -> Sample {
        let turns = *self.0.choose(rng).expect("validated non-empty");
        rotate90(&sample, turns)
    }
}

struct IntensityShift(f64);

impl Augmentation for IntensityShift {
    fn name(&self) -> &'static str {
        "intensity_shift"
    }

    fn apply(&self, mut sample: Sample, rng: &mut dyn rand::RngCore) -> Sample {
        if self.0 > 0.0 {
            let u = rng.random_range(-self.0..=self.0) as f32;
            sample.image.data_mut().iter_mut().for_each(|v| *v = (*v + u).clamp(0.0, 1.0));
        }
        sample
    }
}

pub type AugmentFactory = fn(&AugmentConfig) -> Box<dyn Augmentation>;

pub fn augmentation_registry() -> Registry<AugmentFactory> {
    let mut r: Registry<AugmentFactory> = Registry::new("augmentation");
    r.register("flip", |c| Box::new(RandomFlip(c.flip_prob))).expect("fresh registry");
    r.register("rotate90", |c| Box::new(RandomRotate90(c.rotations.clone()))).expect("fresh registry");
    r.register("intensity_shift", |c| Box::new(IntensityShift(c.intensity_shift))).expect("fresh registry");
    r
}

/// The configured pipeline, resolved once.
pub struct Augmenter {
    steps: Vec<Box<dyn Augmentation>>,
}

impl Augmenter {
    pub fn new(cfg: &AugmentConfig) -> Result<Self> {
        cfg.validate()?;
        let registry = augmentation_registry();
        let steps = cfg.pipeline.iter().map(|n| registry.get(n).map(|f| f(cfg))).collect::<Result<_>>()?;
        Ok(Self { steps })
    }

    pub fn apply(&self, sample: Sample, rng: &mut dyn rand::RngCore) -> Sample {
        self.steps.iter().fold(sample, |s, step| step.apply(s, rng))
    }
}

/// Flip, rotate and shift intensities of one pair; labels are only permuted.
pub fn augment(sample: Sample, cfg: &AugmentConfig, rng: &mut dyn rand::RngCore) -> Result<Sample> {
    Ok(Augmenter::new(cfg)?.apply(sample, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Random,
    Center,
}

/// Probability that a random crop is forced to contain foreground.
pub const FOREGROUND_BIAS: f64 = 0.5;

/// Zero-pad undersized axes symmetrically (extra voxel on the high side), then crop.
pub fn crop_or_pad(sample: &Sample, patch: [usize; 3], mode: CropMode, rng: &mut dyn rand::RngCore) -> Sample {
    let dims = sample.image.dims();
    let padded: [usize; 3] = std::array::from_fn(|a| dims[a].max(patch[a]));
    let before: [usize; 3] = std::array::from_fn(|a| (padded[a] - dims[a]) / 2);
    let max_start: [usize; 3] = std::array::from_fn(|a| padded[a] - patch[a]);

    let start: [usize; 3] = match mode {
        CropMode::Center => std::array::from_fn(|a| max_start[a] / 2),
        CropMode::Random => {
            let foreground: Vec<usize> =
                sample.label.data().iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i).collect();
            if !foreground.is_empty() && rng.random::<f64>() < FOREGROUND_BIAS {
                let c = sample.label.coords(foreground[rng.random_range(0..foreground.len())]);
                std::array::from_fn(|a| {
                    let p = c[a] + before[a];
                    let lo = (p + 1).saturating_sub(patch[a]);
                    let hi = p.min(max_start[a]);
                    rng.random_range(lo..=hi)
                })
            } else {
                std::array::from_fn(|a| rng.random_range(0..=max_start[a]))
            }
        }
    };

    let src = |w: usize, h: usize, d: usize| -> Option<[usize; 3]> {
        let p = [w + start[0], h + start[1], d + start[2]];
        let mut c = [0; 3];
        for a in 0..3 {
            if p[a] < before[a] || p[a] - before[a] >= dims[a] {
                return None;
            }
            c[a] = p[a] - before[a];
        }
        Some(c)
    };
    Sample {
        image: Grid3::from_fn(patch, |w, h, d| src(w, h, d).map_or(0.0, |[a, b, c]| sample.image.get(a, b, c))),
        label: Grid3::from_fn(patch, |w, h, d| src(w, h, d).map_or(0, |[a, b, c]| sample.label.get(a, b, c))),
    }
}
