use cats_autodiff::{grad_check, GradCheckOptions, Tensor};
use cats_core::metrics::*;
use cats_core::volume::Grid3;
use proptest::prelude::*;

fn cube(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Grid3<bool> {
    Grid3::from_fn(dims, |w, h, d| (lo[0]..hi[0]).contains(&w) && (lo[1]..hi[1]).contains(&h) && (lo[2]..hi[2]).contains(&d))
}

/// Nearest-surface distances by exhaustive pairing of surface voxel centres.
fn brute_distances(a: &Grid3<bool>, b: &Grid3<bool>, spacing: [f64; 3]) -> Vec<f64> {
    let (sa, sb) = (extract_surface(a, spacing), extract_surface(b, spacing));
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    d.extend(sb.iter().map(|p| nearest(p, &sa)));
    d
}

/// Independent percentile: sorted values, linear interpolation at rank q(n-1).
fn brute_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let r = q * (v.len() - 1) as f64;
    let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
    v[lo] * (1.0 - (r - lo as f64)) + v[hi] * (r - lo as f64)
}

fn logits_for(targets: &[u16], k: usize, margin: f64) -> Tensor<f64> {
    let n = targets.len();
    let mut data = vec![0.0; k * n];
    for (i, &t) in targets.iter().enumerate() {
        data[t as usize * n + i] = margin;
    }
    Tensor::from_vec(data, &[1, k, n, 1, 1]).unwrap()
}

#[test]
fn dice_loss_near_zero_for_confident_correct_logits() {
    let targets: Vec<u16> = (0..64).map(|i| (i % 3) as u16).collect();
    let loss = dice_loss(&logits_for(&targets, 3, 20.0), &targets).unwrap().item();
    assert!(loss < 0.01, "{}", loss);
}

#[test]
fn dice_loss_of_uniform_prediction_on_balanced_binary_target() {
    let targets: Vec<u16> = (0..64).map(|i| (i % 2) as u16).collect();
    let loss = dice_loss(&logits_for(&targets, 2, 0.0), &targets).unwrap().item();
    assert!((loss - 0.5).abs() < 1e-6, "{}", loss);
}

#[test]
fn dice_loss_rejects_bad_targets() {
    let logits = Tensor::<f64>::zeros(&[1, 2, 2, 2, 2]);
    assert!(dice_loss(&logits, &[0; 7]).is_err());
    assert!(dice_loss(&logits, &[2; 8]).is_err());
}

#[test]
fn dice_loss_gradient_matches_finite_differences() {
    let targets: Vec<u16> = (0..2 * 27).map(|i| ((i * 7) % 3) as u16).collect();
    let data: Vec<f64> = (0..2 * 3 * 27).map(|i| ((i as f64) * 0.37).sin()).collect();
    let logits = Tensor::from_vec(data, &[2, 3, 3, 3, 3]).unwrap();
    let report = grad_check(|ts| Ok(dice_loss(&ts[0], &targets).unwrap()), &[logits], GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_error < 1e-6, "{:?}", report);
    assert_eq!(report.checked, 162);
}

#[test]
fn dice_score_examples() {
    let dims = [4, 4, 4];
    let a = Grid3::from_fn(dims, |w, _, _| (w < 2) as u16);
    let b = Grid3::from_fn(dims, |w, _, _| (w < 1) as u16);
    // |A| = 32, |B| = 16, |A ∩ B| = 16.
    assert!((dice_score(&a, &b, 1).unwrap() - 2.0 * 16.0 / 48.0).abs() < 1e-12);
    assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
    let empty = Grid3::filled(dims, 0u16);
    assert_eq!(dice_score(&empty, &empty, 1).unwrap(), 1.0);
    assert_eq!(dice_score(&a, &empty, 1).unwrap(), 0.0);
    assert!(dice_score(&a, &Grid3::filled([4, 4, 5], 0u16), 1).is_err());
}

#[test]
fn surface_voxel_counts() {
    let one = cube([5; 3], [2; 3], [3; 3]);
    assert_eq!(surface_indices(&one).len(), 1);
    assert_eq!(surface_indices(&cube([7; 3], [2; 3], [5; 3])).len(), 26);
    assert_eq!(surface_indices(&cube([8; 3], [2; 3], [6; 3])).len(), 56);
    // A full grid is exposed only at the border.
    assert_eq!(surface_indices(&Grid3::filled([3; 3], true)).len(), 26);
}

#[test]
fn single_voxel_distances_respect_spacing() {
    let a = cube([8; 3], [1, 2, 2], [2, 3, 3]);
    let b = cube([8; 3], [4, 2, 2], [5, 3, 3]);
    let spacing = [2.0, 1.0, 1.0];
    assert!((asd(&a, &b, spacing).unwrap().unwrap() - 6.0).abs() < 1e-12);
    assert!((hd95(&a, &b, spacing).unwrap().unwrap() - 6.0).abs() < 1e-12);
}

#[test]
fn identical_masks_have_zero_distance() {
    let a = cube([10; 3], [2; 3], [7; 3]);
    assert_eq!(asd(&a, &a, [1.0; 3]).unwrap(), Some(0.0));
    assert_eq!(hd95(&a, &a, [1.0; 3]).unwrap(), Some(0.0));
}

#[test]
fn empty_mask_distances_are_undefined() {
    let a = cube([6; 3], [1; 3], [3; 3]);
    let empty = Grid3::filled([6; 3], false);
    assert_eq!(asd(&a, &empty, [1.0; 3]).unwrap(), None);
    assert_eq!(hd95(&empty, &empty, [1.0; 3]).unwrap(), None);
}

#[test]
fn nested_cubes_match_exhaustive_distances() {
    let inner = cube([11; 3], [4; 3], [7; 3]);
    let outer = cube([11; 3], [2; 3], [9; 3]);
    let spacing = [1.0, 1.5, 0.7];
    let d = brute_distances(&inner, &outer, spacing);
    let expected_asd = d.iter().sum::<f64>() / d.len() as f64;
    let pair = MaskPair::new(&inner, &outer, spacing).unwrap();
    assert!((pair.asd().unwrap() - expected_asd).abs() < 1e-9);
    assert!((pair.hd95().unwrap() - brute_percentile(d, 0.95)).abs() < 1e-9);
}

#[test]
fn metric_registry_names() {
    let r = metric_registry();
    assert_eq!(r.names(), vec!["dice", "asd", "hd95"]);
    let a = cube([6; 3], [1; 3], [4; 3]);
    let pair = MaskPair::new(&a, &a, [1.0; 3]).unwrap();
    assert_eq!((r.get("dice").unwrap())(&pair), Some(1.0));
    assert!(r.get("hd100").is_err());
}

#[test]
fn report_summaries() {
    let dims = [6, 6, 6];
    let truth = Grid3::from_fn(dims, |w, _, _| if w < 2 { 1u16 } else if w < 4 { 2 } else { 0 });
    let pred_a = truth.clone();
    let pred_b = Grid3::from_fn(dims, |w, _, _| if w < 1 { 1u16 } else if w < 4 { 2 } else { 0 });
    let mut report = MetricsReport::new(vec![1, 2]);
    report.add_case("a", &pred_a, &truth, [1.0; 3]).unwrap();
    report.add_case("b", &pred_b, &truth, [1.0; 3]).unwrap();
    let d1 = 2.0 * 36.0 / (36.0 + 72.0);
    let d2 = 2.0 * 72.0 / (108.0 + 72.0);
    let s1 = report.summary(1, Metric::Dice).unwrap();
    assert!((s1.mean - (1.0 + d1) / 2.0).abs() < 1e-12);
    assert!((s1.std - (1.0 - d1) / 2.0).abs() < 1e-12);
    let avg = report.class_average(Metric::Dice).unwrap();
    assert!((avg - (2.0 + d1 + d2) / 4.0).abs() < 1e-12);
    assert!((report.mean_dice() - avg).abs() < 1e-12);
    assert_eq!(report.to_tsv().lines().count(), 5);
    assert!(report.render_table().contains("HD95 (mm)"));
}

fn mask_strategy() -> impl Strategy<Value = Grid3<bool>> {
    prop::collection::vec(prop::bool::weighted(0.3), 6 * 5 * 4).prop_map(|v| Grid3::new([6, 5, 4], v).unwrap())
}

fn flip_w(m: &Grid3<bool>) -> Grid3<bool> {
    let [nw, _, _] = m.dims();
    Grid3::from_fn(m.dims(), |w, h, d| m.get(nw - 1 - w, h, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distances_match_exhaustive_oracle(a in mask_strategy(), b in mask_strategy(), sx in 0.5f64..2.0) {
        let spacing = [sx, 1.0, 1.25];
        let pair = MaskPair::new(&a, &b, spacing).unwrap();
        if let Some(asd) = pair.asd() {
            let d = brute_distances(&a, &b, spacing);
            prop_assert!((asd - d.iter().sum::<f64>() / d.len() as f64).abs() < 1e-9);
            prop_assert!((pair.hd95().unwrap() - brute_percentile(d, 0.95)).abs() < 1e-9);
        }
    }

    #[test]
    fn metrics_are_symmetric(a in mask_strategy(), b in mask_strategy()) {
        let ab = MaskPair::new(&a, &b, [1.0; 3]).unwrap();
        let ba = MaskPair::new(&b, &a, [1.0; 3]).unwrap();
        prop_assert_eq!(ab.dice(), ba.dice());
        prop_assert_eq!(ab.asd().map(|v| (v * 1e9).round()), ba.asd().map(|v| (v * 1e9).round()));
        prop_assert_eq!(ab.hd95(), ba.hd95());
    }

    #[test]
    fn metrics_are_flip_invariant(a in mask_strategy(), b in mask_strategy()) {
        let p = MaskPair::new(&a, &b, [1.0; 3]).unwrap();
        let (fa, fb) = (flip_w(&a), flip_w(&b));
        let q = MaskPair::new(&fa, &fb, [1.0; 3]).unwrap();
        prop_assert!((p.dice() - q.dice()).abs() < 1e-12);
        if let (Some(x), Some(y)) = (p.asd(), q.asd()) {
            prop_assert!((x - y).abs() < 1e-9);
            prop_assert!((p.hd95().unwrap() - q.hd95().unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn distance_orderings(a in mask_strategy(), b in mask_strategy()) {
        let p = MaskPair::new(&a, &b, [1.0; 3]).unwrap();
        if let Some(d) = p.surface_distances() {
            let max = d.iter().cloned().fold(0.0, f64::max);
            prop_assert!(p.hd95().unwrap() <= max + 1e-12);
            prop_assert!(p.asd().unwrap() <= max + 1e-12);
            prop_assert!(p.asd().unwrap() >= 0.0);
        }
        let dice = p.dice();
        prop_assert!((0.0..=1.0).contains(&dice));
    }
}
