use fedhd_core::metrics::{accuracy, auc, mcc, weighted_average};
use proptest::prelude::*;

/// Binary MCC from the confusion counts.
fn binary_mcc(preds: &[usize], labels: &[usize]) -> f64 {
    let count = |p, l| preds.iter().zip(labels).filter(|&(&a, &b)| a == p && b == l).count() as f64;
    let (tp, tn, fp, fn_) = (count(1, 1), count(0, 0), count(1, 0), count(0, 1));
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den
    }
}

fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

proptest! {
    #[test]
    fn mcc_matches_binary_formula(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..60)) {
        let (preds, labels): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let a = mcc(&preds, &labels, 2).unwrap();
        prop_assert!((a - binary_mcc(&preds, &labels)).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn mcc_is_one_for_perfect_multiclass(labels in prop::collection::vec(0usize..4, 2..40)) {
        prop_assume!(labels.iter().any(|&l| l != labels[0]));
        prop_assert!((mcc(&labels, &labels, 4).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
    }

    #[test]
    fn auc_matches_pair_counting(items in prop::collection::vec((0u8..8, any::<bool>()), 2..50)) {
        let scores: Vec<f64> = items.iter().map(|i| i.0 as f64 / 4.0).collect();
        let labels: Vec<bool> = items.iter().map(|i| i.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        prop_assert!((auc(&scores, &labels).unwrap() - pair_auc(&scores, &labels)).abs() < 1e-12);
        // flipping the scores mirrors the AUC
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&flipped, &labels).unwrap() - (1.0 - pair_auc(&scores, &labels))).abs() < 1e-12);
    }

    #[test]
    fn weighted_average_of_constant_is_constant(c in 0.0f64..1.0, w in prop::collection::vec(1usize..200, 1..10)) {
        let m = vec![c; w.len()];
        let w: Vec<f64> = w.into_iter().map(|x| x as f64).collect();
        prop_assert!((weighted_average(&m, &w) - c).abs() < 1e-12);
    }
}
