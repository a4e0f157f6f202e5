use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Area under the ROC curve from the Mann-Whitney rank statistic; tied
/// scores count one half. `None` unless both classes occur.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != positive.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // sum over positives of (#negatives below + ½ #negatives tied)
    let mut concordant = 0.0;
    let mut below_neg = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| positive[k]).count();
        let neg = (j - i) - pos;
        concordant += pos as f64 * below_neg as f64 + 0.5 * (pos * neg) as f64;
        below_neg += neg;
        i = j;
    }
    Some(concordant / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC averaged over classes.
///
/// `scores` has one column per class. With two columns this is the ordinary
/// AUC of column 1 for class 1. Classes absent from `labels` are skipped
/// with a warning; fewer than two present classes is an error.
pub fn macro_auc(scores: &Matrix, labels: &[usize]) -> Result<f64> {
    let c = scores.cols();
    if scores.rows() != labels.len() {
        return Err(Error::dims("macro_auc", scores.rows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::dims("macro_auc", format!("{c} score columns"), format!("label {bad}")));
    }
    let present: Vec<usize> = (0..c).filter(|k| labels.contains(k)).collect();
    if present.len() < 2 {
        return Err(Error::SingleClass);
    }
    if c == 2 {
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc(&scores.column(1), &pos).ok_or(Error::SingleClass);
    }
    for k in (0..c).filter(|k| !present.contains(k)) {
        log::warn!("macro_auc: class {k} absent from labels, excluded");
    }
    let mut total = 0.0;
    for &k in &present {
        let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        total += auc(&scores.column(k), &pos).ok_or(Error::SingleClass)?;
    }
    Ok(total / present.len() as f64)
}

/// Harrell's concordance index.
///
/// A pair is comparable when the subject with the strictly shorter time had
/// an event; it is concordant when that subject also has the higher risk.
/// Tied risks count one half; tied times are never comparable.
pub fn c_index(risk: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let n = risk.len();
    if times.len() != n || events.len() != n {
        return Err(Error::dims("c_index", n, format!("{} times, {} events", times.len(), events.len())));
    }
    let mut comparable = 0usize;
    let mut score = 0.0;
    for i in 0..n {
        if !events[i] {
            continue;
        }
        for j in 0..n {
            if times[i] < times[j] {
                comparable += 1;
                if risk[i] > risk[j] {
                    score += 1.0;
                } else if risk[i] == risk[j] {
                    score += 0.5;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok(score / comparable as f64)
}
