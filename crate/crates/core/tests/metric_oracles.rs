//! Metrics against brute-force oracles.

use ecgauth::metrics::{binary_auc, confusion_and_prf, error_curve, roc_auc_macro, topk_accuracy};
use ecgauth::Tensor;
use proptest::prelude::*;

fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// FAR/FRR by direct counting at every candidate threshold, then the same
/// linear interpolation at the first sign change of FAR − FRR.
fn swept_eer(genuine: &[f64], impostor: &[f64]) -> f64 {
    let mut ts: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.push(f64::INFINITY);
    let rate = |t: f64| {
        let far = impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
        let frr = genuine.iter().filter(|&&s| s < t).count() as f64 / genuine.len() as f64;
        (far, frr)
    };
    let mut prev = rate(ts[0]);
    for &t in &ts {
        let (far, frr) = rate(t);
        if far == frr {
            return far;
        }
        if far < frr {
            let (d0, d1) = (prev.0 - prev.1, far - frr);
            return prev.0 + d0 / (d0 - d1) * (far - prev.0);
        }
        prev = (far, frr);
    }
    unreachable!()
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    // Quarter steps make ties common.
    prop::collection::vec((0i32..24).prop_map(|v| v as f64 / 4.0), 1..30)
}

fn prob_matrix(n: usize, c: usize) -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (
        prop::collection::vec(0.01f64..1.0, n * c),
        prop::collection::vec(0..c, n),
    )
        .prop_map(move |(raw, labels)| {
            let mut data = raw;
            for row in data.chunks_mut(c) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            (Tensor::new(vec![n, c], data).unwrap(), labels)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn auc_equals_pairwise_count(pos in scores(), neg in scores()) {
        prop_assert_eq!(binary_auc(&pos, &neg).unwrap(), pairwise_auc(&pos, &neg));
    }

    #[test]
    fn eer_equals_exhaustive_sweep(gen in scores(), imp in scores()) {
        let curve = error_curve(&gen, &imp).unwrap();
        prop_assert!((curve.eer - swept_eer(&gen, &imp)).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&curve.eer));
        prop_assert!(curve.far.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(curve.frr.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn increasing_transforms_leave_rank_metrics_unchanged(gen in scores(), imp in scores()) {
        let f = |v: &[f64]| v.iter().map(|s| (3.0 * s + 1.0).exp()).collect::<Vec<_>>();
        prop_assert_eq!(binary_auc(&gen, &imp).unwrap(), binary_auc(&f(&gen), &f(&imp)).unwrap());
        prop_assert_eq!(error_curve(&gen, &imp).unwrap().eer, error_curve(&f(&gen), &f(&imp)).unwrap().eer);
    }

    #[test]
    fn separated_scores_are_perfect(gen in scores(), imp in scores()) {
        let lifted: Vec<f64> = gen.iter().map(|s| s + 100.0).collect();
        prop_assert_eq!(binary_auc(&lifted, &imp).unwrap(), 1.0);
        prop_assert_eq!(error_curve(&lifted, &imp).unwrap().eer, 0.0);
    }

    #[test]
    fn topk_grows_with_k((probs, labels) in prob_matrix(12, 6)) {
        let accs: Vec<f64> = (1..=6).map(|k| topk_accuracy(&probs, &labels, k).unwrap()).collect();
        prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(accs[5], 1.0);
    }

    #[test]
    fn macro_auc_lies_in_unit_interval((probs, labels) in prob_matrix(20, 4)) {
        if let Ok(m) = roc_auc_macro(&probs, &labels) {
            prop_assert!((0.0..=1.0).contains(&m.value));
            prop_assert_eq!(m.per_class.iter().filter(|v| v.is_none()).count(), m.excluded_classes.len());
        }
    }

    #[test]
    fn confusion_counts_every_sample(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
    ) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let c = confusion_and_prf(&labels, &preds, 4).unwrap();
        let total: usize = c.matrix.iter().flatten().sum();
        prop_assert_eq!(total, labels.len());
        let diag: usize = (0..4).map(|k| c.matrix[k][k]).sum();
        let acc = labels.iter().zip(&preds).filter(|(a, b)| a == b).count();
        prop_assert_eq!(diag, acc);
    }
}
