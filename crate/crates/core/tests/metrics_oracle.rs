mod common;

use common::oracles::pairwise_auc;
use ctcn_core::hdlc::{confusion, metrics, roc_auc, ConfusionMatrix};
use ctcn_core::rng;
use proptest::prelude::*;
use rand::Rng;

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[test]
fn hand_example() {
    // 9 tp, 1 fp, 2 fn, 8 tn
    let mut probs = vec![0.9; 9];
    probs.push(0.7);
    probs.extend([0.2, 0.3]);
    probs.extend([0.1; 8]);
    let mut labels = vec![1u8; 9];
    labels.push(0);
    labels.extend([1, 1]);
    labels.extend([0; 8]);
    let cm = confusion(&probs, &labels, 0.5).unwrap();
    assert_eq!(cm, ConfusionMatrix { tp: 9, fp: 1, tn: 8, fn_: 2 });
    let m = metrics(&cm).unwrap();
    assert_eq!(round4(m.accuracy), 0.85);
    assert_eq!(round4(m.precision), 0.9);
    assert_eq!(round4(m.recall), 0.8182);
    assert_eq!(round4(m.f1), 0.8571);
    let roc = roc_auc(&probs, &labels).unwrap();
    assert!((roc.auc - pairwise_auc(&probs, &labels)).abs() < 1e-12);
}

#[test]
fn undefined_ratios_are_flagged() {
    let m = metrics(&ConfusionMatrix { tp: 0, fp: 0, tn: 5, fn_: 0 }).unwrap();
    assert!(m.precision_undefined && m.recall_undefined && m.f1_undefined);
    assert_eq!(m.accuracy, 1.0);
    assert!(roc_auc(&[0.1, 0.2], &[0, 0]).is_err());
    assert!(roc_auc(&[f64::NAN, 0.2], &[0, 1]).is_err());
}

#[test]
fn auc_matches_pairwise_oracle_on_random_scores() {
    for seed in 0..200 {
        let mut r = rng::stream(seed, "auc.oracle", 0);
        let n = r.gen_range(2..80);
        let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..10u8)) / 10.0).collect();
        let roc = roc_auc(&scores, &labels).unwrap();
        assert!((roc.auc - pairwise_auc(&scores, &labels)).abs() < 1e-12, "seed {seed}");
        let last = roc.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }
}

proptest! {
    #[test]
    fn confusion_counts_partition(probs in prop::collection::vec(0.0f64..1.0, 1..60), t in 0.0f64..1.0) {
        let labels: Vec<u8> = probs.iter().enumerate().map(|(i, _)| (i % 3 == 0) as u8).collect();
        let cm = confusion(&probs, &labels, t).unwrap();
        prop_assert_eq!(cm.total(), probs.len());
        let m = metrics(&cm).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.accuracy));
        if !m.f1_undefined {
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
            prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-12);
        }
    }

    #[test]
    fn auc_is_invariant_to_monotone_maps(scores in prop::collection::vec(-3.0f64..3.0, 4..40)) {
        let mut labels: Vec<u8> = scores.iter().map(|&s| (s.sin() > 0.0) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let a = roc_auc(&scores, &labels).unwrap().auc;
        let mapped: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let b = roc_auc(&mapped, &labels).unwrap().auc;
        prop_assert!((a - b).abs() < 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc(&flipped, &labels).unwrap().auc - (1.0 - a)).abs() < 1e-12);
    }
}
