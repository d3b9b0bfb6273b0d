use proptest::prelude::*;

use ssmamba_core::check::pairwise_auc;
use ssmamba_core::metrics;

#[test]
fn accuracy_and_macro_f1_by_hand() {
    let (t, p) = ([0, 0, 1, 1, 2], [0, 1, 1, 1, 0]);
    assert_eq!(metrics::accuracy(&t, &p).unwrap(), 60.0);
    // Per-class F1: 2/4, 4/5, 0.
    let f1 = metrics::macro_f1(&t, &p).unwrap();
    assert!((f1 - 100.0 * (0.5 + 0.8 + 0.0) / 3.0).abs() < 1e-12, "{f1}");
    assert_eq!(metrics::macro_f1(&[1, 1], &[1, 1]).unwrap(), 100.0);
    assert!(metrics::accuracy(&[], &[]).is_err());
    assert!(metrics::accuracy(&[0, 1], &[0]).is_err());
}

#[test]
fn auc_extremes_and_ties() {
    let pos = [false, false, true, true];
    assert_eq!(metrics::auc_binary(&pos, &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
    assert_eq!(metrics::auc_binary(&pos, &[0.4, 0.3, 0.2, 0.1]).unwrap(), 0.0);
    assert_eq!(metrics::auc_binary(&pos, &[0.5; 4]).unwrap(), 0.5);
    assert!(metrics::auc_binary(&[true, true], &[0.1, 0.2]).is_err());
    assert!(metrics::auc_binary(&pos, &[0.1, f64::NAN, 0.2, 0.3]).is_err());
}

#[test]
fn one_vs_rest_auc_averages_present_classes() {
    let y = [0, 1, 2, 2, 1, 0, 2];
    let scores: Vec<Vec<f64>> = (0..7)
        .map(|i| vec![(i * 37 % 11) as f64, (i * 13 % 7) as f64, (i * 5 % 3) as f64, 0.0])
        .collect();
    let mut want = 0.0;
    for c in 0..3 {
        let pos: Vec<bool> = y.iter().map(|&v| v == c).collect();
        want += pairwise_auc(&pos, &scores.iter().map(|r| r[c]).collect::<Vec<_>>());
    }
    // Class 3 never occurs and is left out of the average.
    assert!((metrics::auc_ovr(&y, &scores).unwrap() - 100.0 * want / 3.0).abs() < 1e-12);
}

#[test]
fn binary_evaluation_ranks_the_positive_column() {
    let y = [0, 1, 1, 0, 1];
    let logits: Vec<Vec<f64>> = [-2.0, 1.0, 0.5, -0.1, 3.0].iter().map(|&d| vec![0.0, d]).collect();
    let m = metrics::evaluate(&y, &logits).unwrap();
    assert_eq!(m.acc, 100.0);
    assert_eq!(m.macro_f1, 100.0);
    assert_eq!(m.auc, 100.0);
    let r = metrics::Metrics { acc: 95.555, macro_f1: 1.0 / 3.0, auc: 99.994 }.rounded();
    assert_eq!((r.acc, r.macro_f1, r.auc), (95.56, 0.33, 99.99));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rank_auc_equals_pairwise_count(
        items in prop::collection::vec((any::<bool>(), 0u8..12), 2..200)
    ) {
        let pos: Vec<bool> = items.iter().map(|p| p.0).collect();
        let scores: Vec<f64> = items.iter().map(|p| p.1 as f64 / 4.0).collect();
        prop_assume!(pos.iter().any(|&b| b) && pos.iter().any(|&b| !b));
        prop_assert_eq!(metrics::auc_binary(&pos, &scores).unwrap(), pairwise_auc(&pos, &scores));
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = metrics::softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
