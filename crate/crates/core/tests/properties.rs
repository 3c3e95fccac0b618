use proptest::prelude::*;
use tamm_core::datagen::{generate, DatasetSpec, ShiftSetting};
use tamm_core::encoders::{point_encode, PointCloud, PointEncoderParams};
use tamm_core::eval::{argmax, fewshot_episode, zeroshot_topk, CategoryBank, InferenceMode};
use tamm_core::losses::{chunked_contrastive_accuracy, contrastive_accuracy};
use tamm_core::numkit::{dot, l2_normalize, logsumexp_row, norm, normalize_rows, Matrix};
use tamm_core::rng::{normal_vec, permutation, seeded};
use tamm_core::train::DualFeatures;

fn unit_rows(seed: u64, n: usize, d: usize) -> Matrix {
    let mut rng = seeded(seed, 7);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, d)).collect();
    normalize_rows(&Matrix::from_rows(&rows).unwrap()).unwrap().0
}

proptest! {
    #[test]
    fn logsumexp_shifts(row in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
        let a = logsumexp_row(&row).unwrap() + c;
        let b = logsumexp_row(&shifted).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn normalize_gives_unit_norm(v in prop::collection::vec(-1e3f64..1e3, 1..32)) {
        prop_assume!(norm(&v) > 1e-6);
        let (u, _) = l2_normalize(&v).unwrap();
        prop_assert!((norm(&u) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_ignores_positive_scaling(seed in 0u64..1000, n in 2usize..12, s in 0.01f64..100.0) {
        let a = unit_rows(seed, n, 6);
        let b = unit_rows(seed + 1, n, 6);
        prop_assert_eq!(contrastive_accuracy(&a, &b).unwrap(), contrastive_accuracy(&a.scale(s), &b).unwrap());
    }

    #[test]
    fn argmax_ignores_positive_scaling(scores in prop::collection::vec(-10.0f64..10.0, 1..30), s in 1e-3f64..1e3) {
        let scaled: Vec<f64> = scores.iter().map(|x| x * s).collect();
        prop_assert_eq!(argmax(&scores), argmax(&scaled));
    }

    #[test]
    fn topk_is_nested(seed in 0u64..500, n in 1usize..40) {
        let classes = 6;
        let bank = CategoryBank::new(unit_rows(seed, classes, 8), (0..classes as u32).collect()).unwrap();
        let feats = DualFeatures { vision: unit_rows(seed + 1, n, 8), semantic: unit_rows(seed + 2, n, 8) };
        let labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
        for mode in InferenceMode::ALL {
            let r = zeroshot_topk(&feats, &labels, &bank, mode, &[1, 3, 5]).unwrap();
            prop_assert!(r[0].1 <= r[1].1 && r[1].1 <= r[2].1, "{:?}", r);
        }
    }
}

#[test]
fn episodes_are_disjoint_and_sized() {
    let labels: Vec<u32> = (0..1000).map(|i| (i % 10) as u32).collect();
    let pool: Vec<usize> = (0..labels.len()).collect();
    for seed in 0..100 {
        let ep = fewshot_episode(&labels, &pool, 5, 10, seed).unwrap();
        assert_eq!(ep.support.len(), 50);
        assert_eq!(ep.query.len(), 100);
        let mut all: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 150, "seed {seed}: support and query overlap");
        assert!(all.iter().all(|&i| ep.classes.contains(&labels[i])));
    }
}

#[test]
fn point_encoder_is_permutation_invariant() {
    let params = PointEncoderParams::init(32, 16, 3).unwrap();
    let mut rng = seeded(11, 0);
    let pts: Vec<[f64; 3]> = (0..200)
        .map(|_| {
            let v = normal_vec(&mut rng, 3);
            [v[0], v[1], v[2]]
        })
        .collect();
    let base = point_encode(&PointCloud::new(pts.clone()).unwrap(), &params).unwrap();
    for _ in 0..100 {
        let perm = permutation(&mut rng, pts.len());
        let shuffled: Vec<[f64; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let f = point_encode(&PointCloud::new(shuffled).unwrap(), &params).unwrap();
        assert!(f.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn random_features_score_chance() {
    let mut total = 0.0;
    for seed in 0..1000 {
        let a = unit_rows(seed, 16, 8);
        let b = unit_rows(seed + 5000, 16, 8);
        total += chunked_contrastive_accuracy(&a, &b, 16).unwrap();
    }
    let mean = total / 1000.0;
    assert!((mean - 1.0 / 16.0).abs() < 0.01, "{mean}");
}

#[test]
fn unshifted_pairs_stand_out() {
    let spec = DatasetSpec {
        classes: 10,
        heldout_classes: 3,
        samples_per_class: 20,
        eval_seen_per_class: 5,
        points: 64,
        shift: ShiftSetting::Fixed(0.0),
        ..DatasetSpec::default()
    };
    let set = generate(&spec).unwrap();
    let img = &set.images[0];
    let n = set.len();
    let mut matched: Vec<f64> = (0..n).map(|i| dot(img.row(i), set.texts.row(i))).collect();
    let mut cross: Vec<f64> = Vec::new();
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            cross.push(dot(img.row(i), set.texts.row(j)));
        }
    }
    cross.sort_by(f64::total_cmp);
    matched.sort_by(f64::total_cmp);
    let p95 = cross[cross.len() * 95 / 100];
    let median = matched[n / 2];
    assert!(median > p95, "matched median {median} vs cross p95 {p95}");
}
