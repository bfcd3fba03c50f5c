use cats_autodiff::{ops, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 6), 1..6),
        shift in -50.0f64..50.0,
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.concat();
        let x = Tensor::from_vec(flat.clone(), &[n, 6]).unwrap();
        let y = ops::softmax(&x, 1).unwrap();
        for row in y.data().chunks(6) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let shifted = Tensor::from_vec(flat.iter().map(|v| v + shift).collect(), &[n, 6]).unwrap();
        let z = ops::softmax(&shifted, 1).unwrap();
        for (a, b) in y.data().iter().zip(z.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(
        dims in prop::collection::vec(1usize..4, 1..5),
        seed in any::<u64>(),
    ) {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|i| (i as f64) * 0.5 + (seed % 7) as f64).collect();
        let x = Tensor::from_vec(data, &dims).unwrap();
        let mut perm: Vec<usize> = (0..dims.len()).collect();
        perm.rotate_left((seed as usize) % dims.len());
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let back = x.permute(&perm).unwrap().permute(&inverse).unwrap();
        prop_assert_eq!(back.data(), x.data());
        prop_assert_eq!(back.shape(), x.shape());
    }
}
