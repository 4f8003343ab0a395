mod common;

use common::{gaussian, rng, uniform};
use proptest::prelude::*;
use rand::Rng;
use subdistill::analysis::{
    band_alignment_score, centered_kernel, kernel_mass_fraction, linear_cka, patch_correlation,
    KernelMatrix, RelevanceMap,
};
use subdistill::data::{make_split, LabeledDataset};
use subdistill::loss::{subspace_matching_loss, Centering};
use subdistill::model::{decode_checkpoint, encode_checkpoint, NetworkSpec, NetworkState};
use subdistill::numerics::{orthogonality_defect, qr_orthonormalize, stiefel_retract, Matrix};
use subdistill::subspace::{Subspace, SubspaceMethod};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cka_is_bounded_and_symmetric(seed in any::<u64>(), n in 4usize..20, dx in 1usize..6, dy in 1usize..6) {
        let mut r = rng(seed);
        let x = gaussian(n, dx, &mut r);
        let y = gaussian(n, dy, &mut r);
        let a = linear_cka(&x, &y).unwrap();
        let b = linear_cka(&y, &x).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
    }

    /// A student that reproduces the projected teacher up to a rotation and a
    /// shift has zero subspace loss and CKA one with the projection.
    #[test]
    fn zero_loss_means_perfect_alignment(seed in any::<u64>(), n in 6usize..30, d in 3usize..8) {
        let mut r = rng(seed);
        let k = r.gen_range(1..=d);
        let teacher = gaussian(n, d, &mut r).scale(r.gen_range(0.1..10.0));
        let sub = Subspace {
            u: qr_orthonormalize(&gaussian(d, k, &mut r)).unwrap(),
            mu_teacher: teacher.col_means(),
            layer_index: 1,
            k,
            beta_used: 0.0,
            method: SubspaceMethod::Random,
            eigenvalues: vec![],
        };
        let v = qr_orthonormalize(&gaussian(k, k, &mut r)).unwrap();
        let shift: Vec<f64> = (0..k).map(|_| r.gen_range(-5.0..5.0)).collect();
        let student = sub.project(&teacher).matmul(&v).add_row(&shift);
        let loss = subspace_matching_loss(&v, &sub, &teacher, &student, Centering::BatchMean).unwrap();
        prop_assert!(loss.loss < 1e-20 * (1.0 + teacher.frobenius_norm_sq()));
        let cka = linear_cka(&student, &sub.project(&teacher)).unwrap();
        prop_assert!((cka - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn retraction_lands_on_the_manifold(seed in any::<u64>(), n in 2usize..9, extra in 0usize..5) {
        let mut r = rng(seed);
        let k = n.min(1 + extra);
        let v = qr_orthonormalize(&gaussian(n + extra, k, &mut r)).unwrap();
        let step = gaussian(n + extra, k, &mut r).scale(r.gen_range(0.0..0.5));
        let out = stiefel_retract(&v, &step).unwrap();
        prop_assert!(orthogonality_defect(&out) <= 1e-10);
    }

    #[test]
    fn patch_correlation_ignores_positive_affine_maps(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -10.0f64..10.0) {
        let mut r = rng(seed);
        let values: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
        let other: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
        let map = |v: Vec<f64>| RelevanceMap { values: v, target: 0, rule_trace: vec![] };
        let a = map(values.clone());
        let b = map(other.clone());
        let b2 = map(other.iter().map(|v| scale * v + shift).collect());
        let p1 = patch_correlation(&a, &b, (8, 8), 2).unwrap().pearson;
        let p2 = patch_correlation(&a, &b2, (8, 8), 2).unwrap().pearson;
        prop_assert!((p1 - p2).abs() < 1e-9);
        let p3 = patch_correlation(&a, &a, (8, 8), 4).unwrap().pearson;
        prop_assert!((p3 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn band_score_and_mass_are_scale_free(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let t = centered_kernel(&uniform(12, 3, &mut r)).unwrap();
        let s = centered_kernel(&uniform(12, 3, &mut r)).unwrap();
        let scaled = KernelMatrix { values: s.values.scale(scale), centered: true };
        let a = band_alignment_score(&t, &s, 4..8).unwrap();
        let b = band_alignment_score(&t, &scaled, 4..8).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
        let m = kernel_mass_fraction(&s, 4..8).unwrap();
        prop_assert!((m - kernel_mass_fraction(&scaled, 4..8).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), w1 in 1usize..8, w2 in 1usize..8) {
        let net = NetworkState::init(&NetworkSpec::relu(vec![3, w1, w2, 2], seed)).unwrap();
        let bytes = encode_checkpoint(&net);
        prop_assert_eq!(decode_checkpoint(&bytes, "mem").unwrap(), net);
    }

    #[test]
    fn held_out_split_is_stable_across_fractions(seed in any::<u64>(), per_class in 5usize..20) {
        let labels: Vec<usize> = (0..3 * per_class).map(|i| i % 3).collect();
        let ds = LabeledDataset::new(Matrix::zeros(labels.len(), 2), labels, "z".into()).unwrap();
        let big = make_split(&ds, [0.6, 0.2, 0.2], 0.8, seed).unwrap();
        let small = make_split(&ds, [0.6, 0.2, 0.2], 0.25, seed).unwrap();
        prop_assert_eq!(&big.val, &small.val);
        prop_assert_eq!(&big.test, &small.test);
        prop_assert!(small.train.iter().all(|i| big.train.contains(i)));
        let mut all: Vec<usize> = big.train_pool.iter().chain(&big.val).chain(&big.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }
}
