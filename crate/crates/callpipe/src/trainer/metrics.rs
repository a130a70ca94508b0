//! Binary classification metrics and ROC analysis.
//!
//! The positive class is "call" (any non-background class). AUC is the
//! trapezoidal area under the ROC curve with tied scores grouped into one
//! threshold step, which makes it exactly the normalized Mann-Whitney
//! statistic (ties counted half).

use crate::error::{Error, Result};

/// The tracked classification metrics, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn check_labels(labels: &[u8], scores: &[f64]) -> Result<()> {
    if labels.is_empty() || labels.len() != scores.len() {
        return Err(Error::InvalidArgument(format!(
            "need equal non-empty labels/scores, got {} / {}",
            labels.len(),
            scores.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("label {bad} is not in {{0, 1}}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    Ok(())
}

/// One operating point of the ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RocPoint {
    /// Classify positive when `score >= threshold`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Sweeps thresholds over the unique scores (descending) and returns the
/// operating points plus the trapezoidal AUC.
///
/// Needs at least one positive and one negative label.
pub fn roc_curve(labels: &[u8], scores: &[f64]) -> Result<(Vec<RocPoint>, f64)> {
    check_labels(labels, scores)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidArgument(
            "AUC is undefined without both classes present".into(),
        ));
    }

    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // Group equal scores into one step.
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }

    let mut auc = 0.0;
    for pair in points.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }
    Ok((points, auc))
}

/// ROC points as `(fpr, tpr)` plus the AUC.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<(Vec<(f64, f64)>, f64)> {
    let (points, auc) = roc_curve(labels, scores)?;
    Ok((points.iter().map(|p| (p.fpr, p.tpr)).collect(), auc))
}

/// The ROC-optimal (Youden) threshold: argmax of `tpr − fpr`.
pub fn youden_threshold(labels: &[u8], scores: &[f64]) -> Result<f64> {
    let (points, _) = roc_curve(labels, scores)?;
    let best = points
        .iter()
        .skip(1) // the sentinel point classifies nothing positive
        .max_by(|a, b| (a.tpr - a.fpr).partial_cmp(&(b.tpr - b.fpr)).unwrap())
        .expect("at least one real point");
    Ok(best.threshold)
}

/// Thresholded binary metrics plus AUC.
///
/// Predictions are `score >= threshold`; precision and recall fall back to
/// 0 when their denominators vanish. Both classes must be present (AUC).
pub fn compute_metrics(labels: &[u8], scores: &[f64], threshold: f64) -> Result<Metrics> {
    check_labels(labels, scores)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&label, &score) in labels.iter().zip(scores) {
        let predicted = score >= threshold;
        match (label == 1, predicted) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den > 0 { num as f64 / den as f64 } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let (_, auc) = roc_auc(labels, scores)?;
    Ok(Metrics {
        accuracy: (tp + tn) as f64 / labels.len() as f64,
        precision,
        recall,
        f1: f1_score(precision, recall),
        auc,
    })
}
