use cats_core::preprocess::*;
use cats_core::volume::{Grid3, IntensityUnits, LabelVolume, Volume};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn volume(dims: [usize; 3], spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> f32) -> Volume {
    Volume::with_spacing(Grid3::from_fn(dims, f), spacing).unwrap()
}

fn sample(dims: [usize; 3]) -> Sample {
    let image = Grid3::from_fn(dims, |w, h, d| ((w * 31 + h * 7 + d * 3) % 17) as f32 / 16.0);
    let label = Grid3::from_fn(dims, |w, h, d| ((w + 2 * h + 3 * d) % 3) as u16);
    Sample::new(image, label).unwrap()
}

fn histogram(g: &Grid3<u16>) -> Vec<usize> {
    let mut h = vec![0; 8];
    g.data().iter().for_each(|&v| h[v as usize] += 1);
    h
}

#[test]
fn clip_and_normalize_examples() {
    let v = Volume::new(
        Grid3::new([5, 1, 1], vec![-500.0, -175.0, 37.5, 250.0, 900.0]).unwrap(),
        [1.0; 3],
        cats_core::volume::diagonal_affine([1.0; 3]),
        IntensityUnits::Hounsfield,
    )
    .unwrap();
    let out = clip_and_normalize(&v, -175.0, 250.0);
    assert_eq!(out.data.data(), &[0.0, 0.0, 0.5, 1.0, 1.0]);
    assert_eq!(out.units, IntensityUnits::Normalized);
    assert_eq!(out.affine(), v.affine());
}

#[test]
fn constant_volumes_map_to_constants() {
    let at = |c: f32| clip_and_normalize(&volume([3; 3], [1.0; 3], |_, _, _| c), -175.0, 250.0);
    assert!(at(175.0).data.data().iter().all(|&v| (v - 350.0 / 425.0).abs() < 1e-6));
    assert!(at(425.0).data.data().iter().all(|&v| v == 1.0));
}

#[test]
fn normalisation_is_idempotent_on_unit_window() {
    let v = volume([4; 3], [1.0; 3], |w, h, d| (w * 100 + h * 10 + d) as f32 - 300.0);
    let once = clip_and_normalize(&v, -175.0, 250.0);
    let twice = clip_and_normalize(&once, 0.0, 1.0);
    assert_eq!(once.data, twice.data);
}

#[test]
fn percentile_window_uses_volume_quantiles() {
    let v = volume([101, 1, 1], [1.0; 3], |w, _, _| w as f32);
    assert_eq!(percentile_window(&v, 1.0, 99.0), (1.0, 99.0));
    let cfg = PreprocessConfig { window: IntensityWindow::Percentile { lo: 0.0, hi: 100.0 }, target_spacing: None };
    let (out, _) = cfg.apply(&v, None).unwrap();
    assert_eq!(out.data.get(50, 0, 0), 0.5);
}

#[test]
fn resample_to_same_spacing_is_identity() {
    let v = volume([5, 6, 7], [1.5, 1.5, 3.0], |w, h, d| (w + h * d) as f32);
    assert_eq!(resample(&v, [1.5, 1.5, 3.0]).unwrap(), v);
}

#[test]
fn upsampling_a_ramp_interpolates_linearly() {
    let v = volume([4; 3], [2.0; 3], |w, h, d| (w + 10 * h + 100 * d) as f32);
    let up = resample(&v, [1.0; 3]).unwrap();
    assert_eq!(up.dims(), [8; 3]);
    assert_eq!(up.spacing(), [1.0; 3]);
    // Output index i samples source coordinate i/2, clamped at the last voxel.
    let src = |i: usize| (i as f64 / 2.0).min(3.0);
    for (w, h, d) in [(0, 0, 0), (1, 2, 3), (5, 0, 7), (7, 7, 7)] {
        let expected = src(w) + 10.0 * src(h) + 100.0 * src(d);
        assert!((up.data.get(w, h, d) as f64 - expected).abs() < 1e-4, "({w},{h},{d})");
    }
    assert_eq!(up.affine()[0][0], 1.0);
}

#[test]
fn resampling_a_constant_round_trips() {
    let v = volume([6, 6, 4], [1.0, 1.0, 2.5], |_, _, _| 0.375);
    let there = resample(&v, [0.5, 1.5, 1.0]).unwrap();
    let back = resample(&there, [1.0, 1.0, 2.5]).unwrap();
    assert_eq!(back.dims(), v.dims());
    assert!(back.data.data().iter().all(|&x| (x - 0.375).abs() < 1e-6));
}

#[test]
fn label_resampling_is_nearest_neighbour() {
    let l = LabelVolume::with_spacing(Grid3::from_fn([4; 3], |w, _, _| (w % 3) as u16), 3, [2.0; 3]).unwrap();
    let up = resample_labels(&l, [1.0; 3]).unwrap();
    assert_eq!(up.dims(), [8; 3]);
    let values: std::collections::BTreeSet<u16> = up.data.data().iter().copied().collect();
    assert!(values.is_subset(&[0, 1, 2].into()));
    assert_eq!(up.data.get(2, 0, 0), 1);
    assert!(resample_labels(&l, [0.0, 1.0, 1.0]).is_err());
}

#[test]
fn disabled_augmentation_is_identity() {
    let s = sample([6, 5, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(augment(s.clone(), &AugmentConfig::none(), &mut rng).unwrap(), s);
}

#[test]
fn flips_and_rotations_compose_to_identity() {
    let s = sample([6, 5, 4]);
    for axis in 0..3 {
        assert_eq!(flip(&flip(&s, axis), axis), s);
    }
    assert_eq!(rotate90(&s, 1).image.dims(), [5, 6, 4]);
    assert_eq!(rotate90(&rotate90(&s, 3), 1), s);
    assert_eq!(rotate90(&s, 2), flip(&flip(&s, 0), 1));
}

#[test]
fn augmentation_registry_and_validation() {
    assert_eq!(augmentation_registry().names(), vec!["flip", "rotate90", "intensity_shift"]);
    let mut cfg = AugmentConfig::default();
    cfg.pipeline.push("elastic".into());
    assert!(cfg.validate().is_err());
    assert!(AugmentConfig { rotations: vec![4], ..Default::default() }.validate().is_err());
    assert!(AugmentConfig { flip_prob: 1.5, ..Default::default() }.validate().is_err());
}

#[test]
fn augmentation_is_seed_deterministic() {
    let s = sample([8, 8, 8]);
    let cfg = AugmentConfig::default();
    let run = |seed| augment(s.clone(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(3), run(3));
    assert!((0..8).any(|seed| run(seed) != run(seed + 1)));
}

#[test]
fn crop_at_full_extent_is_identity() {
    let s = sample([8, 8, 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(crop_or_pad(&s, [8; 3], CropMode::Center, &mut rng), s);
    assert_eq!(crop_or_pad(&s, [8; 3], CropMode::Random, &mut rng), s);
}

#[test]
fn undersized_volume_is_padded_symmetrically() {
    let s = sample([10; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = crop_or_pad(&s, [16; 3], CropMode::Random, &mut rng);
    assert_eq!(out.image.dims(), [16; 3]);
    for (w, h, d) in [(3, 3, 3), (12, 12, 12), (5, 9, 7)] {
        assert_eq!(out.image.get(w, h, d), s.image.get(w - 3, h - 3, d - 3));
        assert_eq!(out.label.get(w, h, d), s.label.get(w - 3, h - 3, d - 3));
    }
    for (w, h, d) in [(2, 5, 5), (13, 5, 5), (5, 0, 5), (5, 5, 15)] {
        assert_eq!(out.image.get(w, h, d), 0.0);
        assert_eq!(out.label.get(w, h, d), 0);
    }
}

#[test]
fn random_crops_favour_foreground() {
    let dims = [48; 3];
    let label = Grid3::from_fn(dims, |w, h, d| (w == 40 && h == 40 && d == 40) as u16);
    let s = Sample::new(Grid3::filled(dims, 0.0), label).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hits = (0..1000)
        .filter(|_| crop_or_pad(&s, [16; 3], CropMode::Random, &mut rng).label.data().contains(&1))
        .count();
    assert!(hits >= 450, "{} of 1000 crops contain foreground", hits);
}

#[test]
fn patch_divisibility() {
    assert!(check_patch([32, 32, 32], 8).is_ok());
    assert!(check_patch([32, 24, 32], 16).is_err());
    assert!(check_patch([0, 16, 16], 16).is_err());
}

#[test]
fn preprocess_config_validation() {
    assert!(PreprocessConfig::default().validate().is_ok());
    let inverted = PreprocessConfig { window: IntensityWindow::Fixed { lo: 10.0, hi: -10.0 }, target_spacing: None };
    assert!(inverted.validate().is_err());
    let bad = PreprocessConfig { window: IntensityWindow::Percentile { lo: 0.5, hi: 120.0 }, target_spacing: None };
    assert!(bad.validate().is_err());
}

fn sample_strategy() -> impl Strategy<Value = Sample> {
    (2usize..7, 2usize..7, 1usize..5).prop_flat_map(|(w, h, d)| {
        (
            prop::collection::vec(0.0f32..1.0, w * h * d),
            prop::collection::vec(0u16..4, w * h * d),
        )
            .prop_map(move |(i, l)| Sample::new(Grid3::new([w, h, d], i).unwrap(), Grid3::new([w, h, d], l).unwrap()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn augmentation_only_permutes_labels(s in sample_strategy(), seed in any::<u64>()) {
        let out = augment(s.clone(), &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(histogram(&out.label), histogram(&s.label));
        prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn geometric_transforms_keep_image_label_pairs(s in sample_strategy(), axis in 0usize..3, turns in 0usize..4) {
        let pairs = |s: &Sample| {
            let mut v: Vec<(u32, u16)> = s.image.data().iter().map(|x| x.to_bits()).zip(s.label.data().iter().copied()).collect();
            v.sort_unstable();
            v
        };
        prop_assert_eq!(pairs(&flip(&s, axis)), pairs(&s));
        prop_assert_eq!(pairs(&rotate90(&s, turns)), pairs(&s));
    }
}
