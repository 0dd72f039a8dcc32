//! Property tests over the public API.

use nalgebra::DMatrix;
use proptest::prelude::*;

use sourcespace::data::{BoxMask, Cache, CacheKey, Tensor, DENSE_CHANNELS};
use sourcespace::dsp::{resample_rows, standardize};
use sourcespace::inverse::{build_whitener, min_norm_kernel, CovForm, NoiseCovariance};
use sourcespace::seed;
use sourcespace::train::{balanced_accuracy, probability_of_improvement};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn min_norm_matches_explicit_inverse(g in (2usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c)), snr in 0.5f64..10.0) {
        let l2 = 1.0 / (snr * snr);
        let n = g.nrows();
        let k = min_norm_kernel(&g, l2).unwrap();
        let gram = &g * g.transpose() + DMatrix::identity(n, n) * l2;
        let want = g.transpose() * gram.try_inverse().unwrap();
        prop_assert!((k - want).amax() < 1e-8);
    }

    #[test]
    fn whitener_projects_onto_the_signal_space(a in (2usize..10, 1usize..10).prop_flat_map(|(n, r)| matrix(n, r))) {
        let c = &a * a.transpose();
        let w = build_whitener(&NoiseCovariance { matrix: c.clone(), form: CovForm::Regular }).unwrap();
        let p = &w * &c * w.transpose();
        // A projector is symmetric and idempotent with integer trace.
        prop_assert!((&p - p.transpose()).amax() < 1e-8);
        prop_assert!((&p * &p - &p).amax() < 1e-8);
        prop_assert!((p.trace() - p.trace().round()).abs() < 1e-8);
        prop_assert!(p.trace().round() as usize <= a.ncols().min(a.nrows()));
    }

    #[test]
    fn balanced_accuracy_is_symmetric_under_relabelling(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 2..60)) {
        let (p, y): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
        let b = balanced_accuracy(&p, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        let np: Vec<bool> = p.iter().map(|v| !v).collect();
        let ny: Vec<bool> = y.iter().map(|v| !v).collect();
        prop_assert_eq!(b, balanced_accuracy(&np, &ny).unwrap());
        prop_assert!((b + balanced_accuracy(&np, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn improvement_probabilities_are_complementary(a in prop::collection::vec(0u8..5, 1..8), b in prop::collection::vec(0u8..5, 1..8)) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let p = probability_of_improvement(&a, &b);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(p + probability_of_improvement(&b, &a), 1.0);
    }

    #[test]
    fn standardized_rows_have_zero_mean_unit_variance(x in matrix(3, 40)) {
        let (z, _) = standardize(&x);
        for r in 0..z.nrows() {
            let row: Vec<f64> = z.row(r).iter().copied().collect();
            let m = row.iter().sum::<f64>() / row.len() as f64;
            prop_assert!(m.abs() < 1e-9);
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / row.len() as f64;
            // Constant rows stay at zero instead of dividing by zero.
            prop_assert!((v - 1.0).abs() < 1e-9 || v == 0.0);
        }
    }

    #[test]
    fn resampling_scales_length(factor in 1usize..6, blocks in 4usize..40) {
        let n = factor * blocks * 5;
        let x = DMatrix::from_fn(2, n, |r, c| ((c + r) as f64 * 0.1).sin());
        let y = resample_rows(&x, 100.0 * factor as f64, 100.0).unwrap();
        prop_assert_eq!(y.ncols(), n / factor);
        prop_assert_eq!(y.nrows(), 2);
    }

    #[test]
    fn cube_masks_zero_exactly_the_box(a in prop::array::uniform3(0usize..4), ext in prop::array::uniform3(0usize..4)) {
        let dims = [4, 4, 4];
        let b: [usize; 3] = std::array::from_fn(|i| (a[i] + ext[i]).min(3));
        let nc = 64;
        let mut s = vec![1.0; DENSE_CHANNELS * nc];
        BoxMask { a, b }.apply(&mut s, dims);
        let expect: usize = (0..3).map(|i| b[i] - a[i] + 1).product();
        let zero = (0..nc).filter(|&c| s[c] == 0.0).count();
        prop_assert_eq!(zero, expect);
        prop_assert!(s[3 * nc..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tensors_round_trip_bitwise(bits in prop::collection::vec(any::<u64>(), 1..200)) {
        let values: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path());
        let key = CacheKey::new("prop", "sub-00", "ses-0");
        cache.store(&key, &Tensor::f64(vec![values.len()], values.clone()).unwrap()).unwrap();
        let back = cache.load(&key).unwrap();
        let same = back.as_f64().unwrap().iter().zip(&values).all(|(x, y)| x.to_bits() == y.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn derived_seeds_are_stable_and_path_sensitive(root in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(seed::derive(root, &[a, b]), seed::derive(root, &[a, b]));
        prop_assume!(a != b);
        prop_assert_ne!(seed::derive(root, &[a, b]), seed::derive(root, &[b, a]));
    }
}
