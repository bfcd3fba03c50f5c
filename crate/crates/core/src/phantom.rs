//! Synthetic volumes with analytically known labels.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CatsError, Result};
use crate::volume::{Grid3, IntensityUnits, LabelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    /// Axis-aligned cube with half-width `radius`.
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomObject {
    pub kind: ShapeKind,
    /// Centre in voxel coordinates.
    pub center: [f64; 3],
    pub radius: f64,
    pub class: u16,
}

impl PhantomObject {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        let d: [f64; 3] = std::array::from_fn(|a| p[a] as f64 - self.center[a]);
        match self.kind {
            ShapeKind::Sphere => d.iter().map(|v| v * v).sum::<f64>() <= self.radius * self.radius,
            ShapeKind::Box => d.iter().all(|v| v.abs() <= self.radius),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticPhantomSpec {
    pub count: usize,
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    /// Including background.
    pub num_classes: usize,
    pub objects_per_volume: usize,
    pub kinds: Vec<ShapeKind>,
    /// Inclusive range of object radii in voxels.
    pub radius: [f64; 2],
    pub background: f64,
    /// Intensity step between background and the brightest class.
    pub contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticPhantomSpec {
    fn default() -> Self {
        Self {
            count: 2,
            extents: [32; 3],
            spacing: [1.0; 3],
            num_classes: 2,
            objects_per_volume: 2,
            kinds: vec![ShapeKind::Sphere, ShapeKind::Box],
            radius: [4.0, 8.0],
            background: 0.2,
            contrast: 0.6,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticPhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: &str| Err(CatsError::config(format!("phantom.{field}"), msg));
        if self.count == 0 {
            return err("count", "must be positive");
        }
        if self.num_classes < 2 {
            return err("num_classes", "need background plus at least one class");
        }
        if self.kinds.is_empty() {
            return err("kinds", "at least one object kind is required");
        }
        if !(self.radius[0] > 0.0 && self.radius[0] <= self.radius[1]) {
            return err("radius", "expected 0 < min <= max");
        }
        if self.extents.iter().any(|&e| (e as f64) < 2.0 * self.radius[1].ceil() + 1.0) {
            return err("radius", "objects must fit within the extents");
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return err("spacing", "must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return err("noise_sigma", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.background) || !(0.0..=1.0).contains(&(self.background + self.contrast)) {
            return err("contrast", "background and brightest class must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub name: String,
    pub image: Volume,
    pub label: LabelVolume,
    pub objects: Vec<PhantomObject>,
}

/// Rasterise objects in order (later objects overwrite earlier ones).
pub fn rasterize(extents: [usize; 3], objects: &[PhantomObject]) -> Grid3<u16> {
    Grid3::from_fn(extents, |w, h, d| {
        objects.iter().rev().find(|o| o.contains([w, h, d])).map_or(0, |o| o.class)
    })
}

pub fn generate_phantoms(spec: &SyntheticPhantomSpec) -> Result<Vec<Phantom>> {
    spec.validate()?;
    let k = spec.num_classes;
    (0..spec.count)
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index as u64);
            let objects: Vec<PhantomObject> = (0..spec.objects_per_volume)
                .map(|o| {
                    let radius = if spec.radius[0] == spec.radius[1] {
                        spec.radius[0]
                    } else {
                        rng.random_range(spec.radius[0]..=spec.radius[1])
                    };
                    let margin = radius.ceil();
                    let center = std::array::from_fn(|a| {
                        let hi = spec.extents[a] as f64 - 1.0 - margin;
                        if hi > margin {
                            rng.random_range(margin..=hi)
                        } else {
                            margin
                        }
                    });
                    let kind = *spec.kinds.choose(&mut rng).expect("validated non-empty");
                    PhantomObject { kind, center, radius, class: (o % (k - 1) + 1) as u16 }
                })
                .collect();
            let labels = rasterize(spec.extents, &objects);
            let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
            let step = spec.contrast / (k - 1) as f64;
            let image = labels.map(|c| spec.background + step * c as f64);
            let image = image.map(|v| {
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (v + n).clamp(0.0, 1.0) as f32
            });
            let mut image = Volume::with_spacing(image, spec.spacing)?;
            image.units = IntensityUnits::Normalized;
            Ok(Phantom {
                name: format!("phantom_{:03}", index),
                image,
                label: LabelVolume::with_spacing(labels, k, spec.spacing)?,
                objects,
            })
        })
        .collect()
}
