use cats_autodiff::ops::softmax;
use cats_autodiff::Tensor;
use cats_core::config::CatsConfig;
use cats_core::inference::*;
use cats_core::params::Phase;
use cats_core::volume::Grid3;
use cats_core::{CatsNet, SegmentationModel};

fn image(dims: [usize; 3]) -> Grid3<f32> {
    Grid3::from_fn(dims, |w, h, d| (((w * 13 + h * 7 + d * 5) % 23) as f32 / 22.0).powi(2))
}

fn toy(classes: usize) -> (CatsNet, cats_core::ModelState<f32>) {
    let mut cfg = CatsConfig::toy();
    cfg.unet.num_classes = classes;
    let net = CatsNet::new(cfg).unwrap();
    let state = SegmentationModel::<f32>::init_state(&net, 21).unwrap();
    (net, state)
}

#[test]
fn tile_start_examples() {
    assert_eq!(tile_starts(32, 16, 16), vec![0, 16]);
    assert_eq!(tile_starts(40, 16, 16), vec![0, 16, 24]);
    assert_eq!(tile_starts(32, 16, 8), vec![0, 8, 16]);
    assert_eq!(tile_starts(10, 16, 16), vec![0]);
    assert_eq!(window_stride(16, 0.5), 8);
    assert_eq!(window_stride(16, 0.0), 16);
    assert_eq!(window_stride(2, 0.9), 1);
}

#[test]
fn argmax_prefers_lower_class_on_ties() {
    let probs = [0.5, 0.2, 0.3, 0.5, 0.8, 0.4];
    let labels = argmax_classes(&probs, 2, [3, 1, 1]);
    assert_eq!(labels.data(), &[0, 1, 1]);
}

#[test]
fn non_overlapping_tiles_equal_independent_predictions() {
    let (net, state) = toy(3);
    let img = image([32, 16, 32]);
    let pred = sliding_window(&net, &state, &img, [16; 3], 0.0).unwrap();
    for (sw, sd) in [(0, 0), (16, 0), (0, 16), (16, 16)] {
        let tile = Grid3::from_fn([16; 3], |w, h, d| img.get(sw + w, h, sd + d));
        let x = Tensor::from_vec(tile.into_data(), &[1, 1, 16, 16, 16]).unwrap();
        let logits = net.forward(&state.params, &mut Phase::Eval(&state.stats), &x).unwrap();
        let probs = softmax(&logits, 1).unwrap();
        let labels = argmax_classes(probs.data(), 3, [16; 3]);
        for w in 0..16 {
            for h in 0..16 {
                for d in 0..16 {
                    assert_eq!(pred.labels.get(sw + w, h, sd + d), labels.get(w, h, d));
                }
            }
        }
    }
}

#[test]
fn probabilities_sum_to_one_with_overlap() {
    let (net, state) = toy(2);
    let img = image([24, 16, 20]);
    let pred = sliding_window(&net, &state, &img, [16; 3], 0.5).unwrap();
    let n = img.len();
    for i in (0..n).step_by(97) {
        let s = pred.probabilities[i] + pred.probabilities[n + i];
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn small_volumes_are_padded_and_cropped_back() {
    let (net, state) = toy(3);
    let img = image([10, 12, 9]);
    let pred = sliding_window(&net, &state, &img, [16; 3], 0.25).unwrap();
    assert_eq!(pred.labels.dims(), [10, 12, 9]);
    assert_eq!(pred.probabilities.len(), 3 * img.len());
    assert!(pred.labels.data().iter().all(|&c| c < 3));
}

#[test]
fn invalid_windows_and_overlaps_are_rejected() {
    let (net, state) = toy(2);
    let img = image([16; 3]);
    assert!(sliding_window(&net, &state, &img, [10, 16, 16], 0.0).is_err());
    assert!(sliding_window(&net, &state, &img, [16; 3], 1.0).is_err());
    assert!(sliding_window(&net, &state, &img, [16; 3], -0.1).is_err());
}

#[test]
fn larger_windows_resize_position_embedding() {
    let (net, state) = toy(2);
    let img = image([32; 3]);
    let pred = sliding_window(&net, &state, &img, [32; 3], 0.0).unwrap();
    assert_eq!(pred.labels.dims(), [32; 3]);
}
