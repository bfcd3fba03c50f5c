//! Whole-volume prediction by overlapping tiles with uniform probability averaging.

use cats_autodiff::ops::softmax;
use cats_autodiff::Tensor;
use rayon::prelude::*;

use crate::error::{CatsError, Result};
use crate::model::SegmentationModel;
use crate::params::{ModelState, Phase};
use crate::volume::Grid3;

/// Tile origins along one axis: every `stride` voxels, with the last tile flush with the end.
pub fn tile_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    if extent <= window {
        return vec![0];
    }
    let last = extent - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

/// Stride for a window and fractional overlap in `[0, 1)`.
pub fn window_stride(window: usize, overlap: f64) -> usize {
    ((window as f64 * (1.0 - overlap)).floor() as usize).max(1)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Averaged class probabilities, `[K, W, H, D]`.
    pub probabilities: Vec<f32>,
    pub labels: Grid3<u16>,
}

/// Per-voxel argmax; ties resolve to the lower class index.
pub fn argmax_classes(probs: &[f32], classes: usize, dims: [usize; 3]) -> Grid3<u16> {
    let n: usize = dims.iter().product();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if probs[c * n + i] > probs[best * n + i] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    Grid3::new(dims, labels).expect("extent product matches")
}

pub fn sliding_window(
    model: &dyn SegmentationModel<f32>,
    state: &ModelState<f32>,
    image: &Grid3<f32>,
    window: [usize; 3],
    overlap: f64,
) -> Result<Prediction> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(CatsError::config("overlap", format!("{} is outside [0, 1)", overlap)));
    }
    let cfg = model.config();
    let multiple = if model.name() == "cats" { cfg.transformer.patch.max(1 << cfg.depth()) } else { 1 << cfg.depth() };
    if let Some(&bad) = window.iter().find(|&&w| w == 0 || w % multiple != 0) {
        return Err(CatsError::config("window", format!("extent {} is not a positive multiple of {}", bad, multiple)));
    }
    let k = cfg.num_classes();
    let dims = image.dims();
    let padded: [usize; 3] = std::array::from_fn(|a| dims[a].max(window[a]));
    let before: [usize; 3] = std::array::from_fn(|a| (padded[a] - dims[a]) / 2);
    let canvas = Grid3::from_fn(padded, |w, h, d| {
        let p = [w, h, d];
        if (0..3).all(|a| p[a] >= before[a] && p[a] - before[a] < dims[a]) {
            image.get(w - before[0], h - before[1], d - before[2])
        } else {
            0.0
        }
    });

    let n_pad: usize = padded.iter().product();
    let mut sums = vec![0.0f64; k * n_pad];
    let mut counts = vec![0u32; n_pad];
    let starts: Vec<Vec<usize>> =
        (0..3).map(|a| tile_starts(padded[a], window[a], window_stride(window[a], overlap))).collect();
    let mut origins = Vec::new();
    for &sw in &starts[0] {
        for &sh in &starts[1] {
            for &sd in &starts[2] {
                origins.push([sw, sh, sd]);
            }
        }
    }
    let tile_len: usize = window.iter().product();
    // Tiles run concurrently; accumulation below follows tile order so results are deterministic.
    let tiles: Vec<Vec<f32>> = origins
        .par_iter()
        .map(|&[sw, sh, sd]| -> Result<Vec<f32>> {
            let tile = Grid3::from_fn(window, |w, h, d| canvas.get(sw + w, sh + h, sd + d));
            let x = Tensor::from_vec(tile.into_data(), &[1, 1, window[0], window[1], window[2]])?;
            let logits = model.forward(&state.params, &mut Phase::Eval(&state.stats), &x)?;
            Ok(softmax(&logits, 1)?.to_vec())
        })
        .collect::<Result<_>>()?;
    for ([sw, sh, sd], p) in origins.iter().zip(&tiles) {
        for i in 0..tile_len {
            let [w, h, d] = coords(window, i);
            let j = canvas.index(sw + w, sh + h, sd + d);
            counts[j] += 1;
            for c in 0..k {
                sums[c * n_pad + j] += p[c * tile_len + i] as f64;
            }
        }
    }

    let n: usize = dims.iter().product();
    let mut probabilities = vec![0.0f32; k * n];
    let out = Grid3::filled(dims, 0u8);
    for i in 0..n {
        let [w, h, d] = out.coords(i);
        let j = canvas.index(w + before[0], h + before[1], d + before[2]);
        for c in 0..k {
            probabilities[c * n + i] = (sums[c * n_pad + j] / counts[j] as f64) as f32;
        }
    }
    let labels = argmax_classes(&probabilities, k, dims);
    Ok(Prediction { probabilities, labels })
}

fn coords(dims: [usize; 3], i: usize) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}
