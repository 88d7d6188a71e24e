mod common;

use common::*;
use proptest::prelude::*;
use ramen::metrics::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn library_metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let d = metric_discrepancy(&mut rng, 150);
        assert!(d < 1e-12, "max discrepancy {d}");
    }
}

#[test]
fn ten_choose_three_hand_cases() {
    let rec = |pred: &str, gold: &[&str]| PredictionRecord {
        question_id: 0,
        family: "exist".into(),
        predicted: pred.into(),
        gold: Gold::Multi(gold.iter().map(|s| s.to_string()).collect()),
    };
    let k_of_ten = |k: usize| {
        let gold: Vec<&str> = (0..10).map(|i| if i < k { "yes" } else { "no" }).collect();
        vqa_10choose3(&[rec("yes", &gold)]).unwrap()
    };
    assert!((k_of_ten(2) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(k_of_ten(3), 1.0);
    assert_eq!(k_of_ten(5), 1.0);
    assert!(vqa_10choose3(&[rec("yes", &["yes"; 9])]).is_err());

    let none = rec("cube", &["yes"; 10]);
    assert_eq!(vqa_10choose3(&[none]).unwrap(), 0.0);
    let all = rec(" YES ", &["yes"; 10]);
    assert_eq!(vqa_10choose3(&[all]).unwrap(), 1.0);
}

#[test]
fn empty_input_is_an_error() {
    assert!(simple_accuracy(&[]).is_err());
    assert!(mean_per_type(&[]).is_err());
    assert!(normalized_mean_per_type(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_record_order(seed in any::<u64>(), n in 1usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = single_corpus(&mut rng, n);
        let mut shuffled = recs.clone();
        shuffled.shuffle(&mut rng);
        for f in [simple_accuracy, mean_per_type, normalized_mean_per_type] {
            let (a, b) = (f(&recs).unwrap(), f(&shuffled).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval(seed in any::<u64>(), n in 1usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = multi_corpus(&mut rng, n);
        for v in [vqa_10choose3(&recs).unwrap(), mean_per_type(&recs).unwrap(), normalized_mean_per_type(&recs).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn perfect_predictions_score_one(seed in any::<u64>(), n in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = single_corpus(&mut rng, n);
        for r in &mut recs {
            if let Gold::Single(g) = &r.gold {
                r.predicted = g.to_uppercase();
            }
        }
        prop_assert_eq!(simple_accuracy(&recs).unwrap(), 1.0);
        prop_assert_eq!(mean_per_type(&recs).unwrap(), 1.0);
        prop_assert_eq!(normalized_mean_per_type(&recs).unwrap(), 1.0);
    }
}
