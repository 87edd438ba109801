mod common;

use ctxrec::metrics::{auc, relaimpr, topk_from_rank, topk_metrics};
use proptest::prelude::*;

#[test]
fn rank_auc_equals_pair_counting() {
    assert_eq!(common::auc_mismatches(1000, 23), 0);
}

#[test]
fn ndcg_and_hit_closed_forms() {
    let t = topk_from_rank(3, &[1, 5, 10]);
    assert_eq!(t.ndcg[&10], 0.5);
    assert_eq!(t.hit[&10], 1.0);
    assert_eq!(t.hit[&1], 0.0);
    assert_eq!(t.ndcg[&1], 0.0);
    assert_eq!(topk_from_rank(1, &[10]).ndcg[&10], 1.0);
    // rank 7: 1 / log2(8)
    assert!((topk_from_rank(7, &[10]).ndcg[&10] - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(topk_from_rank(11, &[10]).hit[&10], 0.0);
    let ranked = ["x", "y", "z"];
    assert_eq!(topk_metrics(&ranked, &"z", &[10]).unwrap(), topk_from_rank(3, &[10]));
    assert!(topk_metrics(&ranked, &"w", &[10]).is_err());
}

#[test]
fn relaimpr_reference_rows() {
    assert!((relaimpr(0.8137, 0.7990).unwrap() - 4.916).abs() < 1e-3);
    assert!((relaimpr(0.8044, 0.7853).unwrap() - 6.695).abs() < 1e-3);
    assert!(relaimpr(0.7, 0.5).is_err());
}

#[test]
fn auc_rejects_one_class() {
    assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    assert!(auc(&[0.1], &[1, 0]).is_err());
}

proptest! {
    #[test]
    fn auc_is_invariant_under_monotone_maps(
        raw in prop::collection::vec((-5i32..5, 0u8..2), 2..80),
        scale in 0.1f64..10.0,
        shift in -3.0f64..3.0,
    ) {
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64).collect();
        let labels: Vec<u8> = raw.iter().map(|&(_, l)| l).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let a = auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (s * scale + shift).exp()).collect();
        prop_assert!((a - auc(&mapped, &labels).unwrap()).abs() < 1e-12);
        // flipping every label reflects around one half
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((auc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }
}
