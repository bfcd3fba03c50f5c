use cats_autodiff::{grad_check, ops, GradCheckOptions, Sampling, Tensor};
use cats_core::config::{CatsConfig, UNetConfig};
use cats_core::metrics::dice_loss;
use cats_core::params::{ModelSpecs, ParameterSet, Phase, StatsSet};
use cats_core::unet::*;
use cats_core::{SegmentationModel, UNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn labels(n: usize, k: u16, seed: u64) -> Vec<u16> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn unet_cfg(f: usize, depth: usize) -> UNetConfig {
    UNetConfig { base_channels: f, depth, num_classes: 2, in_channels: 1, batch_norm: true }
}

#[test]
fn encoder_ladder_shapes() {
    let cfg = unet_cfg(16, 4);
    let specs = unet_specs(&cfg);
    let state_params = ParameterSet::<f32>::initialize(&specs.params, 0).unwrap();
    let stats = StatsSet::initialize(&specs.stats);
    let x = Tensor::<f32>::zeros(&[1, 1, 64, 64, 64]);
    let feats = encoder_forward(&cfg, &state_params, &mut Phase::Eval(&stats), &x).unwrap();
    let shapes: Vec<Vec<usize>> = feats.iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![1, 16, 64, 64, 64],
            vec![1, 32, 32, 32, 32],
            vec![1, 64, 16, 16, 16],
            vec![1, 128, 8, 8, 8],
            vec![1, 256, 4, 4, 4]
        ]
    );
    // Zero input through bias-free convs and zero-shift norms stays zero.
    assert!(feats.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn encoder_rejects_indivisible_extent() {
    let cfg = unet_cfg(4, 2);
    let specs = unet_specs(&cfg);
    let p = ParameterSet::<f64>::initialize(&specs.params, 0).unwrap();
    assert!(encoder_forward(&cfg, &p, &mut Phase::Train(None), &random(&[2, 1, 16, 16, 10], 1)).is_err());
}

#[test]
fn decoder_restores_input_extents() {
    for (extents, classes) in [([16, 16, 16], 2), ([8, 16, 24], 3)] {
        let mut cfg = CatsConfig::toy();
        cfg.unet.num_classes = classes;
        cfg.input_extents = extents;
        let net = UNet::new(cfg).unwrap();
        let state = SegmentationModel::<f64>::init_state(&net, 2).unwrap();
        let x = random(&[2, 1, extents[0], extents[1], extents[2]], 3);
        let y = net.forward(&state.params, &mut Phase::Train(None), &x).unwrap();
        assert_eq!(y.shape(), &[2, classes, extents[0], extents[1], extents[2]]);
    }
}

#[test]
fn decoder_widths_mirror_encoder() {
    let cfg = unet_cfg(8, 3);
    let specs = unet_specs(&cfg);
    let ladder = cfg.ladder();
    for i in 0..cfg.depth {
        let up = specs.get(&format!("unet.dec.{i}.up.weight")).unwrap();
        let conv1 = specs.get(&format!("unet.dec.{i}.conv1.weight")).unwrap();
        assert_eq!(up.shape[1], ladder[i]);
        assert_eq!(conv1.shape[1], 2 * ladder[i]);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = CatsConfig::toy();
    let net = UNet::new(cfg).unwrap();
    let state = SegmentationModel::<f64>::init_state(&net, 5).unwrap();
    let x = random(&[2, 1, 16, 16, 16], 6);
    let y = net.forward(&state.params, &mut Phase::Train(None), &x).unwrap();
    dice_loss(&y, &labels(2 * 4096, 2, 7)).unwrap().backward().unwrap();
    for (name, t) in state.params.iter() {
        let g = t.grad().unwrap_or_else(|| panic!("{} has no gradient", name));
        assert!(g.iter().any(|&v| v != 0.0), "{} gradient is all zero", name);
    }
}

#[test]
fn unet_passes_gradient_check() {
    let cfg = CatsConfig::toy();
    let net = UNet::new(cfg).unwrap();
    let state = SegmentationModel::<f64>::init_state(&net, 8).unwrap();
    let names = state.params.names();
    let x = random(&[2, 1, 16, 16, 16], 9);
    let target = labels(2 * 4096, 2, 10);
    let f = |ts: &[Tensor<f64>]| {
        let p = ParameterSet::from_parts(&names, ts).unwrap();
        let y = net.forward(&p, &mut Phase::Train(None), &x).unwrap();
        Ok(dice_loss(&y, &target).unwrap())
    };
    let report =
        grad_check(f, &state.params.tensors(), GradCheckOptions { sampling: Sampling::PerInput(2), seed: 11, ..Default::default() })
            .unwrap();
    assert!(report.max_rel_error < 1e-4, "{:?}", report);
}

fn residual_params(cin: usize, cout: usize, seed: u64) -> (ModelSpecs, ParameterSet<f64>) {
    let mut specs = ModelSpecs::new();
    residual_block_specs(&mut specs, "res", cin, cout);
    let p = ParameterSet::initialize(&specs.params, seed).unwrap();
    (specs, p)
}

#[test]
fn residual_block_with_zero_conv_is_relu() {
    let (_, p) = residual_params(4, 4, 12);
    let p = p.zeroed(&["res.conv"]);
    let x = random(&[2, 4, 4, 4, 4], 13);
    let y = residual_block(&p, &mut Phase::Train(None), "res", &x).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y.data(), ops::relu(&x).data());
}

#[test]
fn residual_block_width_change_uses_projection() {
    let (specs, p) = residual_params(16, 32, 14);
    assert_eq!(specs.get("res.shortcut.weight").unwrap().shape, vec![32, 16, 1, 1, 1]);
    let x = random(&[2, 16, 4, 4, 4], 15);
    let y = residual_block(&p, &mut Phase::Train(None), "res", &x).unwrap();
    assert_eq!(y.shape(), &[2, 32, 4, 4, 4]);
    let (specs, _) = residual_params(8, 8, 16);
    assert!(specs.get("res.shortcut.weight").is_none());
}
