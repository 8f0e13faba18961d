//! Identification and verification metrics computed from class-probability
//! matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::rank_row;
use crate::numerics::Tensor;

pub const TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// `matrix[true][predicted]`.
    pub matrix: Vec<Vec<usize>>,
    pub per_class: Vec<ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn check_labels(labels: &[usize], n: usize, n_classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape {
            op: "metrics",
            lhs: vec![labels.len()],
            rhs: vec![n],
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::domain(format!("label {l} outside {n_classes} classes")));
    }
    Ok(())
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Confusion matrix and macro precision/recall/F1. Classes never predicted
/// score precision 0 and still count toward the macro mean.
pub fn confusion_and_prf(labels: &[usize], predictions: &[usize], n_classes: usize) -> Result<Confusion> {
    check_labels(labels, predictions.len(), n_classes)?;
    check_labels(predictions, predictions.len(), n_classes)?;
    let mut matrix = vec![vec![0usize; n_classes]; n_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        matrix[y][p] += 1;
    }
    let per_class: Vec<ClassScores> = (0..n_classes)
        .map(|c| {
            let tp = matrix[c][c];
            let support: usize = matrix[c].iter().sum();
            let predicted: usize = matrix.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / n_classes as f64;
    Ok(Confusion {
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
        matrix,
        per_class,
    })
}

fn columns(scores: &Tensor, labels: &[usize]) -> Result<usize> {
    if scores.rank() != 2 {
        return Err(Error::Shape {
            op: "score matrix",
            lhs: scores.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let c = scores.shape()[1];
    check_labels(labels, scores.shape()[0], c)?;
    Ok(c)
}

fn split_scores(scores: &Tensor, labels: &[usize], class: usize) -> (Vec<f64>, Vec<f64>) {
    let c = scores.shape()[1];
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (row, &y) in scores.data().chunks(c).zip(labels) {
        if y == class {
            genuine.push(row[class]);
        } else {
            impostor.push(row[class]);
        }
    }
    (genuine, impostor)
}

/// Mann–Whitney AUC with midranks for ties.
pub fn binary_auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::domain("AUC needs at least one positive and one negative score"));
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::domain("NaN score"));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * all[i..=j].iter().filter(|(_, p)| *p).count() as f64;
        i = j + 1;
    }
    let np = positive.len() as f64;
    let nn = negative.len() as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroScore {
    pub value: f64,
    /// Per class; `None` where the class lacked positives or negatives.
    pub per_class: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
}

fn macro_over_classes(
    scores: &Tensor,
    labels: &[usize],
    f: impl Fn(&[f64], &[f64]) -> Result<f64>,
) -> Result<MacroScore> {
    let c = columns(scores, labels)?;
    let mut per_class = Vec::with_capacity(c);
    let mut excluded = Vec::new();
    for class in 0..c {
        let (g, i) = split_scores(scores, labels, class);
        if g.is_empty() || i.is_empty() {
            per_class.push(None);
            excluded.push(class);
        } else {
            per_class.push(Some(f(&g, &i)?));
        }
    }
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::domain("no class has both positives and negatives"));
    }
    Ok(MacroScore {
        value: vals.iter().sum::<f64>() / vals.len() as f64,
        per_class,
        excluded_classes: excluded,
    })
}

/// One-vs-rest AUC averaged over classes with both positives and negatives.
pub fn roc_auc_macro(scores: &Tensor, labels: &[usize]) -> Result<MacroScore> {
    macro_over_classes(scores, labels, binary_auc)
}

/// FAR/FRR at every distinct score used as an acceptance threshold
/// (accept when `score >= threshold`), ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub thresholds: Vec<f64>,
    pub far: Vec<f64>,
    pub frr: Vec<f64>,
    pub eer: f64,
}

/// Equal error rate with linear interpolation between the two thresholds
/// where FAR − FRR changes sign.
pub fn error_curve(genuine: &[f64], impostor: &[f64]) -> Result<ErrorCurve> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::domain("EER needs genuine and impostor scores"));
    }
    if genuine.iter().chain(impostor).any(|s| s.is_nan()) {
        return Err(Error::domain("NaN score"));
    }
    let mut g = genuine.to_vec();
    let mut im = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    im.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = g.iter().chain(&im).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (ng, ni) = (g.len() as f64, im.len() as f64);
    let mut far = Vec::with_capacity(thresholds.len() + 1);
    let mut frr = Vec::with_capacity(thresholds.len() + 1);
    let (mut gi, mut ii) = (0usize, 0usize);
    for &t in &thresholds {
        while gi < g.len() && g[gi] < t {
            gi += 1;
        }
        while ii < im.len() && im[ii] < t {
            ii += 1;
        }
        far.push((im.len() - ii) as f64 / ni);
        frr.push(gi as f64 / ng);
    }
    // Beyond the largest score nothing is accepted.
    thresholds.push(f64::INFINITY);
    far.push(0.0);
    frr.push(1.0);
    let eer = crossing(&far, &frr);
    Ok(ErrorCurve {
        thresholds,
        far,
        frr,
        eer,
    })
}

fn crossing(far: &[f64], frr: &[f64]) -> f64 {
    for k in 0..far.len() {
        let d = far[k] - frr[k];
        if d == 0.0 {
            return far[k];
        }
        if d < 0.0 {
            // far[0] - frr[0] = 1 > 0, so k >= 1 here.
            let dp = far[k - 1] - frr[k - 1];
            let a = dp / (dp - d);
            return far[k - 1] + a * (far[k] - far[k - 1]);
        }
    }
    unreachable!("the final point has FAR 0 and FRR 1")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EerReport {
    pub macro_eer: MacroScore,
    /// One curve per class; `None` for excluded classes.
    pub curves: Vec<Option<ErrorCurve>>,
}

pub fn eer_macro(scores: &Tensor, labels: &[usize]) -> Result<EerReport> {
    let c = columns(scores, labels)?;
    let mut curves = Vec::with_capacity(c);
    for class in 0..c {
        let (g, i) = split_scores(scores, labels, class);
        curves.push(if g.is_empty() || i.is_empty() {
            None
        } else {
            Some(error_curve(&g, &i)?)
        });
    }
    let macro_eer = macro_over_classes(scores, labels, |g, i| Ok(error_curve(g, i)?.eer))?;
    Ok(EerReport { macro_eer, curves })
}

pub fn topk_accuracy(scores: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let c = columns(scores, labels)?;
    if k == 0 || k > c {
        return Err(Error::domain(format!("k must lie in 1..={c}, got {k}")));
    }
    let hits = scores
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, y)| rank_row(row)[..k].contains(y))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Pooled verification trials over every (sample, class) pair. A trial's
/// score is the class probability when the class ranks in the sample's top
/// `k`, and −∞ (never accepted) otherwise; trials where the class is the
/// true label are genuine.
pub fn eer_topk(scores: &Tensor, labels: &[usize], k: usize) -> Result<ErrorCurve> {
    let c = columns(scores, labels)?;
    let k = k.min(c);
    let mut genuine = Vec::with_capacity(labels.len());
    let mut impostor = Vec::with_capacity(labels.len() * (c - 1));
    for (row, &y) in scores.data().chunks(c).zip(labels) {
        let top = &rank_row(row)[..k];
        for (class, &p) in row.iter().enumerate() {
            let s = if top.contains(&class) { p } else { f64::NEG_INFINITY };
            if class == y {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    error_curve(&genuine, &impostor)
}

pub fn eer_top5(scores: &Tensor, labels: &[usize]) -> Result<ErrorCurve> {
    eer_topk(scores, labels, TOP_K)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub roc_auc: Option<f64>,
    pub eer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub n_classes: usize,
    pub test_loss: f64,
    pub accuracy: f64,
    /// Top-k with `k = min(5, n_classes)`.
    pub top5_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub roc_auc_macro: f64,
    pub eer_macro: f64,
    pub eer_top5: f64,
    pub excluded_classes: Vec<usize>,
    pub per_class: Vec<ClassRow>,
    pub confusion: Vec<Vec<usize>>,
}

/// Full report for probabilities `(n, c)` against `labels`.
pub fn metrics_report(
    probs: &Tensor,
    labels: &[usize],
    class_names: &[String],
    test_loss: f64,
) -> Result<(MetricsReport, EerReport)> {
    let c = columns(probs, labels)?;
    if class_names.len() != c {
        return Err(Error::domain(format!(
            "{} class names for {c} classes",
            class_names.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::domain("no samples to evaluate"));
    }
    let preds: Vec<usize> = probs.data().chunks(c).map(|r| rank_row(r)[0]).collect();
    let conf = confusion_and_prf(labels, &preds, c)?;
    let auc = roc_auc_macro(probs, labels)?;
    let eer = eer_macro(probs, labels)?;
    let per_class = (0..c)
        .map(|k| ClassRow {
            class: k,
            label: class_names[k].clone(),
            precision: conf.per_class[k].precision,
            recall: conf.per_class[k].recall,
            f1: conf.per_class[k].f1,
            support: conf.per_class[k].support,
            roc_auc: auc.per_class[k],
            eer: eer.macro_eer.per_class[k],
        })
        .collect();
    let report = MetricsReport {
        n_samples: labels.len(),
        n_classes: c,
        test_loss,
        accuracy: topk_accuracy(probs, labels, 1)?,
        top5_accuracy: topk_accuracy(probs, labels, TOP_K.min(c))?,
        macro_precision: conf.macro_precision,
        macro_recall: conf.macro_recall,
        macro_f1: conf.macro_f1,
        roc_auc_macro: auc.value,
        eer_macro: eer.macro_eer.value,
        eer_top5: eer_top5(probs, labels)?.eer,
        excluded_classes: auc.excluded_classes,
        per_class,
        confusion: conf.matrix,
    };
    Ok((report, eer))
}
