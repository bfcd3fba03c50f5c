//! Volumetric images and label maps with spacing/affine metadata.

use crate::error::{CatsError, Result};

/// Dense 3D grid, row-major over `[W, H, D]` (D fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) || dims.iter().product::<usize>() != data.len() {
            return Err(CatsError::Data(format!(
                "grid of extents {:?} cannot hold {} values",
                dims,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self { dims, data: vec![value; dims.iter().product()] }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for w in 0..dims[0] {
            for h in 0..dims[1] {
                for d in 0..dims[2] {
                    data.push(f(w, h, d));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, w: usize, h: usize, d: usize) -> usize {
        (w * self.dims[1] + h) * self.dims[2] + d
    }

    #[inline]
    pub fn get(&self, w: usize, h: usize, d: usize) -> T {
        self.data[self.index(w, h, d)]
    }

    #[inline]
    pub fn set(&mut self, w: usize, h: usize, d: usize, value: T) {
        let i = self.index(w, h, d);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid3<U> {
        Grid3 { dims: self.dims, data: self.data.iter().copied().map(f).collect() }
    }

    /// Position of a flat index.
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let d = i % self.dims[2];
        let h = (i / self.dims[2]) % self.dims[1];
        let w = i / (self.dims[1] * self.dims[2]);
        [w, h, d]
    }
}

pub type Affine = [[f64; 4]; 4];

pub fn diagonal_affine(spacing: [f64; 3]) -> Affine {
    [
        [spacing[0], 0.0, 0.0, 0.0],
        [0.0, spacing[1], 0.0, 0.0],
        [0.0, 0.0, spacing[2], 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn check_geometry(spacing: [f64; 3], affine: &Affine) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(CatsError::Data(format!("spacing must be positive, got {:?}", spacing)));
    }
    if affine[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(CatsError::Data(format!("affine last row must be [0,0,0,1], got {:?}", affine[3])));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntensityUnits {
    Hounsfield,
    Normalized,
    #[default]
    Arbitrary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Grid3<f32>,
    spacing: [f64; 3],
    affine: Affine,
    pub units: IntensityUnits,
}

impl Volume {
    pub fn new(data: Grid3<f32>, spacing: [f64; 3], affine: Affine, units: IntensityUnits) -> Result<Self> {
        check_geometry(spacing, &affine)?;
        Ok(Self { data, spacing, affine, units })
    }

    /// Volume with an axis-aligned affine built from `spacing`.
    pub fn with_spacing(data: Grid3<f32>, spacing: [f64; 3]) -> Result<Self> {
        Self::new(data, spacing, diagonal_affine(spacing), IntensityUnits::Arbitrary)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.data.dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub data: Grid3<u16>,
    num_classes: usize,
    spacing: [f64; 3],
    affine: Affine,
}

impl LabelVolume {
    pub fn new(data: Grid3<u16>, num_classes: usize, spacing: [f64; 3], affine: Affine) -> Result<Self> {
        check_geometry(spacing, &affine)?;
        if num_classes < 2 {
            return Err(CatsError::Data(format!("need at least 2 classes, got {}", num_classes)));
        }
        if let Some(&bad) = data.data().iter().find(|&&v| v as usize >= num_classes) {
            return Err(CatsError::Data(format!(
                "label value {} outside [0, {}]",
                bad,
                num_classes - 1
            )));
        }
        Ok(Self { data, num_classes, spacing, affine })
    }

    pub fn with_spacing(data: Grid3<u16>, num_classes: usize, spacing: [f64; 3]) -> Result<Self> {
        Self::new(data, num_classes, spacing, diagonal_affine(spacing))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.data.dims()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    /// Binary mask of one class.
    pub fn mask(&self, class: u16) -> Grid3<bool> {
        self.data.map(|v| v == class)
    }

    /// Voxel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &v in self.data.data() {
            counts[v as usize] += 1;
        }
        counts
    }
}
