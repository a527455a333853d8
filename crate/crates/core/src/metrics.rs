//! Ranking and classification metrics.
//!
//! [`auc`] counts tied (positive, negative) pairs as one half. [`aucpr`] is
//! step-wise average precision; equal scores keep their input order, so an
//! earlier positive is ranked ahead of a later negative with the same score.

use crate::prelude::*;
use crate::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve as the Mann–Whitney statistic.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann–Whitney U, accumulated in half-pair units so ties stay exact.
    let mut wins2 = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let p = group.iter().filter(|&&k| labels[k]).count() as u64;
        let n = group.len() as u64 - p;
        wins2 += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(wins2 as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Average precision: the mean over positives of the precision at each
/// positive's rank, ranking by descending score.
pub fn aucpr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("aucpr needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("NaN rejected above"));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

/// Unweighted mean of per-class F1. A class with no true, predicted or
/// actual members scores 0.
pub fn macro_f1(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!("{} predictions vs {} labels", predictions.len(), labels.len())));
    }
    if n_classes == 0 {
        return Err(Error::Parameter("macro_f1 needs at least one class".into()));
    }
    if let Some(&c) = predictions.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::Parameter(format!("class {c} outside [0, {n_classes})")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let sum: f64 = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / n_classes as f64)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
