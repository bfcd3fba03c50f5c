use cats_autodiff::ops::{mul, sum};
use cats_autodiff::Tensor;
use cats_core::checkpoint::{CheckpointError, FORMAT_VERSION};
use cats_core::config::CatsConfig;
use cats_core::phantom::{generate_phantoms, rasterize, PhantomObject, ShapeKind, SyntheticPhantomSpec};
use cats_core::preprocess::AugmentConfig;
use cats_core::trainer::{sample_order, Case, TrainConfig, Trainer};
use cats_core::{adam_step, AdamConfig, AdamState, CatsError, CatsNet, Checkpoint, ParameterSet};

fn single(values: &[f64]) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    p.insert("w", Tensor::variable(values.to_vec(), &[values.len()]).unwrap()).unwrap();
    p
}

/// Accumulate the gradient of `sum(w * c)`, which is exactly `c`.
fn linear_grad(p: &ParameterSet<f64>, c: &[f64]) {
    let c = Tensor::from_vec(c.to_vec(), &[c.len()]).unwrap();
    sum(&mul(p.get("w").unwrap(), &c).unwrap()).backward().unwrap();
}

fn adam(lr: f64, p: &ParameterSet<f64>) -> AdamState<f64> {
    AdamState::new(AdamConfig { lr, ..AdamConfig::default() }, p)
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = single(&[1.0, -2.0, 0.5]);
    let mut state = adam(1e-3, &p);
    linear_grad(&p, &[3.0, -0.01, 250.0]);
    adam_step(&mut p, &mut state).unwrap();
    let expected = [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3];
    for (a, b) in p.get("w").unwrap().data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
    }
}

#[test]
fn adam_two_steps_follow_hand_trace() {
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let mut p = single(&[0.0]);
    let mut state = adam(lr, &p);
    let mut w = 0.0;
    let (mut m, mut v) = (0.0, 0.0);
    for (t, g) in [(1, 2.0), (2, -1.0)] {
        linear_grad(&p, &[g]);
        adam_step(&mut p, &mut state).unwrap();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - f64::powi(b1, t));
        let vhat = v / (1.0 - f64::powi(b2, t));
        w -= lr * mhat / (vhat.sqrt() + eps);
    }
    assert!((p.get("w").unwrap().data()[0] - w).abs() < 1e-12);
    assert_eq!(state.t, 2);
}

#[test]
fn adam_step_is_gradient_scale_invariant() {
    let run = |scale: f64| {
        let mut p = single(&[0.3, 0.7]);
        let mut state = adam(1e-2, &p);
        for c in [[1.0, -2.0], [0.5, 4.0], [-3.0, 1.0]] {
            linear_grad(&p, &[c[0] * scale, c[1] * scale]);
            adam_step(&mut p, &mut state).unwrap();
            p.zero_grads();
        }
        p.get("w").unwrap().to_vec()
    };
    let (a, b) = (run(1.0), run(1000.0));
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
}

fn toy_spec(count: usize, seed: u64) -> SyntheticPhantomSpec {
    SyntheticPhantomSpec {
        count,
        extents: [16; 3],
        radius: [3.0, 5.0],
        objects_per_volume: 1,
        noise_sigma: 0.02,
        seed,
        ..Default::default()
    }
}

fn toy_cases(count: usize, seed: u64) -> Vec<Case> {
    generate_phantoms(&toy_spec(count, seed))
        .unwrap()
        .into_iter()
        .map(|p| Case { name: p.name, image: p.image.data, label: p.label.data })
        .collect()
}

fn toy_train(lr: f64, max_steps: u64) -> TrainConfig {
    TrainConfig { lr, max_steps, val_interval: 0, seed: 5, augment: AugmentConfig::none(), ..Default::default() }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let net = CatsNet::new(CatsConfig::toy()).unwrap();
    let cases = toy_cases(2, 1);
    let mut trainer = Trainer::new(&net, toy_train(0.0, 3)).unwrap();
    let initial = trainer.state.params.clone();
    for _ in 0..3 {
        trainer.train_step(&cases).unwrap();
    }
    assert!(trainer.state.params.bit_eq(&initial));
    assert_eq!(trainer.adam.t, 3);
}

#[test]
fn frozen_ablated_training_reduces_loss_and_keeps_zeros() {
    let net = CatsNet::new(CatsConfig::toy()).unwrap();
    let cases = toy_cases(2, 2);
    let cfg = TrainConfig { ablate_transformer: true, ..toy_train(1e-2, 40) };
    let mut trainer = Trainer::new(&net, cfg).unwrap();
    let losses: Vec<f64> = (0..40).map(|_| trainer.train_step(&cases).unwrap()).collect();
    let head = losses[..5].iter().sum::<f64>() / 5.0;
    let tail = losses[35..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "loss {} -> {}", head, tail);
    for (name, t) in trainer.state.params.iter() {
        if name.starts_with("transformer.") || name.starts_with("proj.") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{} moved", name);
            assert!(!trainer.adam.m.contains_key(name));
        }
    }
}

#[test]
fn training_is_seed_deterministic() {
    let net = CatsNet::new(CatsConfig::toy()).unwrap();
    let cases = toy_cases(3, 3);
    let run = |seed| {
        let cfg = TrainConfig { seed, augment: AugmentConfig::default(), ..toy_train(1e-3, 3) };
        let mut t = Trainer::new(&net, cfg).unwrap();
        let losses: Vec<u64> = (0..3).map(|_| t.train_step(&cases).unwrap().to_bits()).collect();
        (losses, t.state.params)
    };
    let (la, pa) = run(7);
    let (lb, pb) = run(7);
    assert_eq!(la, lb);
    assert!(pa.bit_eq(&pb));
    assert_ne!(run(8).0, la);
}

#[test]
fn batch_norm_requires_two_samples() {
    let net = CatsNet::new(CatsConfig::toy()).unwrap();
    let cfg = TrainConfig { batch_size: 1, ..toy_train(1e-3, 1) };
    assert!(matches!(Trainer::new(&net, cfg), Err(CatsError::Config { .. })));
}

#[test]
fn sample_order_is_a_permutation_per_epoch() {
    for cases in [1usize, 2, 5, 7] {
        for epoch in 0..4u64 {
            let mut seen: Vec<usize> = (0..cases as u64).map(|j| sample_order(9, cases, epoch * cases as u64 + j)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..cases).collect::<Vec<_>>());
        }
    }
    let epochs: Vec<Vec<usize>> = (0..4u64).map(|e| (0..7).map(|j| sample_order(9, 7, e * 7 + j)).collect()).collect();
    assert!(epochs.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let net = CatsNet::new(CatsConfig::toy()).unwrap();
    let cases = toy_cases(2, 4);
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(&net, toy_train(1e-3, 4)).unwrap();
    trainer.train_step(&cases).unwrap();
    trainer.train_step(&cases).unwrap();
    let path = dir.path().join("mid.ckpt");
    trainer.checkpoint().save(&path).unwrap();

    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    assert!(loaded.state.params.bit_eq(&trainer.state.params));
    assert_eq!(loaded.state.stats, trainer.state.stats);
    assert_eq!(loaded.meta.step, 2);
    let mut resumed = Trainer::resume(&net, toy_train(1e-3, 4), loaded).unwrap();
    for _ in 0..2 {
        let a = trainer.train_step(&cases).unwrap();
        let b = resumed.train_step(&cases).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert!(resumed.state.params.bit_eq(&trainer.state.params));
}

#[test]
fn checkpoint_format_errors() {
    let net = CatsNet::new(CatsConfig::toy()).unwrap();
    let bytes = Trainer::new(&net, toy_train(1e-3, 1)).unwrap().checkpoint().to_bytes();
    assert!(Checkpoint::<f32>::from_bytes(&bytes).is_ok());

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::<f32>::from_bytes(&magic), Err(CheckpointError::BadMagic)));

    let mut version = bytes.clone();
    version[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&version),
        Err(CheckpointError::VersionMismatch { found, expected }) if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION
    ));

    for cut in [10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..cut]), Err(CheckpointError::Truncated)), "cut {}", cut);
    }
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(CheckpointError::DtypeMismatch { .. })));

    let other = CatsNet::new(CatsConfig { input_extents: [32; 3], ..CatsConfig::toy() }).unwrap();
    let ckpt = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert!(Trainer::resume(&other, toy_train(1e-3, 1), ckpt).is_err());
}

#[test]
fn sphere_voxel_count_matches_volume() {
    let r = 8.0;
    let sphere = PhantomObject { kind: ShapeKind::Sphere, center: [16.0; 3], radius: r, class: 1 };
    let count = rasterize([33; 3], &[sphere]).data().iter().filter(|&&v| v == 1).count() as f64;
    let exact = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
    assert!((count - exact).abs() / exact < 0.05, "{} voxels vs {}", count, exact);
    let cube = PhantomObject { kind: ShapeKind::Box, center: [10.0; 3], radius: 3.0, class: 2 };
    assert_eq!(rasterize([20; 3], &[cube]).data().iter().filter(|&&v| v == 2).count(), 343);
}

#[test]
fn noiseless_phantoms_are_piecewise_constant() {
    let spec = SyntheticPhantomSpec { noise_sigma: 0.0, num_classes: 3, ..Default::default() };
    for p in generate_phantoms(&spec).unwrap() {
        let mut level = [None; 3];
        for (&v, &c) in p.image.data.data().iter().zip(p.label.data.data()) {
            let slot = level[c as usize].get_or_insert(v);
            assert_eq!(*slot, v);
        }
        assert_eq!(level[0], Some(0.2));
    }
}

#[test]
fn phantoms_depend_only_on_seed() {
    let a = generate_phantoms(&toy_spec(3, 11)).unwrap();
    let b = generate_phantoms(&toy_spec(3, 11)).unwrap();
    let c = generate_phantoms(&toy_spec(3, 12)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image.data, y.image.data);
        assert_eq!(x.label.data, y.label.data);
    }
    assert_ne!(a[0].image.data, c[0].image.data);
    assert_ne!(a[0].image.data, a[1].image.data);
    assert!(SyntheticPhantomSpec { radius: [5.0, 9.0], ..toy_spec(1, 0) }.validate().is_err());
}
