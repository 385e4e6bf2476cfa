mod common;

use candle_core::{DType, Device, Tensor};
use mdiqa::data::{augment, clean_image, distort, generate_synthetic_sample, LabelRange};
use mdiqa::losses::{apply_override, nin_loss, RatioOverride};
use mdiqa::metrics::{average_ranks, plcc, split_indices, srcc};
use mdiqa::registry::default_registry;
use mdiqa::{DistortionKind, DistortionSpec, ImageTensor, Mdiqa, ModelConfig, WeightVector};
use proptest::prelude::*;

fn t(v: &[f64]) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

fn scalar(x: Tensor) -> f64 {
    x.to_scalar::<f64>().unwrap()
}

fn not_constant(v: &[f64]) -> bool {
    v.iter().any(|&x| x != v[0])
}

/// Pairs of equal-length vectors with small integer values, so ties are common.
fn tied_pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec((0i32..8).prop_map(f64::from), n),
            prop::collection::vec((0i32..8).prop_map(f64::from), n),
        )
    })
}

fn real_pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )
    })
}

proptest! {
    #[test]
    fn correlations_are_bounded_and_symmetric((a, b) in tied_pairs()) {
        prop_assume!(not_constant(&a) && not_constant(&b));
        for f in [srcc, plcc] {
            let ab = f(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert!((ab - f(&b, &a).unwrap()).abs() < 1e-12);
        }
        prop_assert!((srcc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn srcc_ignores_strictly_monotone_maps((a, b) in real_pairs()) {
        prop_assume!(not_constant(&a) && not_constant(&b));
        let mapped: Vec<f64> = a.iter().map(|x| x.powi(3) + (x / 2.0).exp()).collect();
        prop_assert!((srcc(&mapped, &b).unwrap() - srcc(&a, &b).unwrap()).abs() < 1e-12);
        let reversed: Vec<f64> = a.iter().map(|x| -x).collect();
        prop_assert!((srcc(&reversed, &b).unwrap() + srcc(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn plcc_ignores_positive_affine_maps((a, b) in real_pairs(), c in 0.01f64..100.0, d in -50.0f64..50.0) {
        prop_assume!(not_constant(&a) && not_constant(&b));
        let mapped: Vec<f64> = a.iter().map(|x| c * x + d).collect();
        prop_assert!((plcc(&mapped, &b).unwrap() - plcc(&a, &b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn average_ranks_sum_is_fixed(v in prop::collection::vec((0i32..5).prop_map(f64::from), 1..60)) {
        let n = v.len() as f64;
        let r = average_ranks(&v);
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for (i, j) in (0..v.len()).flat_map(|i| (0..v.len()).map(move |j| (i, j))) {
            if v[i] < v[j] {
                prop_assert!(r[i] < r[j]);
            }
        }
    }

    #[test]
    fn nin_is_affine_invariant((p, l) in real_pairs(), c in 0.01f64..100.0, d in -50.0f64..50.0) {
        prop_assume!(not_constant(&p) && not_constant(&l));
        let base = scalar(nin_loss(&t(&p), &t(&l)).unwrap());
        let q: Vec<f64> = p.iter().map(|x| c * x + d).collect();
        prop_assert!((scalar(nin_loss(&t(&q), &t(&l)).unwrap()) - base).abs() < 1e-6);
        prop_assert!((0.0..=4.0 + 1e-9).contains(&base));
    }

    #[test]
    fn splits_partition_the_index_set(n in 1usize..300, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let (train, test) = split_indices(n, ratio, seed);
        prop_assert_eq!(train.len(), ((n as f64 * ratio).round() as usize).min(n));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(n, ratio, seed).0, train);
    }

    #[test]
    fn label_ranges_round_trip(lo in -100.0f64..100.0, span in 0.1f64..100.0, v in 0.0f64..=1.0) {
        let r = LabelRange { lo, hi: lo + span };
        prop_assert!((r.normalize(r.denormalize(v)) - v).abs() < 1e-9);
    }

    #[test]
    fn overrides_scale_exactly_one_weight(
        w in prop::collection::vec(0.01f64..10.0, 9),
        dim in 0usize..9,
        lambda in 0.01f64..10.0,
    ) {
        let names: Vec<String> = default_registry().names().map(str::to_string).collect();
        let wv = WeightVector { names: names.clone(), values: w.clone() };
        let out = apply_override(&wv, &RatioOverride::new().with(&names[dim], lambda)).unwrap();
        for (k, (a, b)) in out.values.iter().zip(&w).enumerate() {
            let expected = if k == dim { b * lambda } else { *b };
            prop_assert_eq!(*a, expected);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn distortions_keep_images_valid(
        seed in any::<u64>(),
        kinds in prop::sample::subsequence(DistortionKind::ALL.to_vec(), 0..=5),
        severity in 0.0f64..=1.0,
    ) {
        let clean = clean_image(40, 36, seed);
        let specs: Vec<DistortionSpec> = kinds.iter().map(|&k| DistortionSpec::new(k, severity)).collect();
        let out = distort(&clean, &specs, seed).unwrap();
        prop_assert_eq!((out.height(), out.width()), (40, 36));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&out, &distort(&clean, &specs, seed).unwrap());
    }

    #[test]
    fn synthetic_labels_are_in_unit_range(seed in any::<u64>(), kinds in prop::sample::subsequence(DistortionKind::ALL.to_vec(), 0..=5), severity in 0.0f64..=1.0) {
        let reg = default_registry();
        let specs: Vec<DistortionSpec> = kinds.iter().map(|&k| DistortionSpec::new(k, severity)).collect();
        let s = generate_synthetic_sample(&clean_image(48, 48, seed), &specs, seed, &reg).unwrap();
        let values: Vec<f64> = s.labels.values.iter().map(|v| v.unwrap()).collect();
        prop_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((s.overall - values.iter().sum::<f64>() / values.len() as f64).abs() < 1e-12);
        for k in kinds {
            prop_assert!((s.labels.get(&reg, k.dimension()).unwrap() - (1.0 - severity)).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_yields_crop_sized_images(seed in any::<u64>(), h in 32usize..60, w in 32usize..60, crop in 32usize..72) {
        let img = clean_image(h, w, seed);
        let out = augment(&img, crop, seed);
        prop_assert_eq!((out.height(), out.width()), (crop, crop));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn weights_are_positive_and_scores_finite(seed in any::<u64>(), fill in 0.0f32..=1.0) {
        let model = Mdiqa::new(&ModelConfig { init_seed: seed, ..ModelConfig::tiny() }, DType::F32).unwrap();
        let images = [clean_image(32, 32, seed), ImageTensor::filled(32, 32, [fill; 3]).unwrap()];
        for q in model.score_images(&images).unwrap() {
            prop_assert!(q.weights.values.iter().all(|&w| w > 0.0));
            prop_assert!(q.overall.is_finite());
            prop_assert!(q.dim_scores.iter().all(|s| s.is_finite()));
        }
    }
}
