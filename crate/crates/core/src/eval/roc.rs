use std::cmp::Ordering;

use super::{check_len, EvalError, Result};

/// `(fpr, tpr)` staircase from `(0, 0)` to `(1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

/// Exact ROC over the in-mask pixels, one step per distinct score, and the
/// trapezoidal area under it. Tied scores form a single diagonal step, which
/// counts each tied positive/negative pair as one half.
pub fn roc_auc(probs: &[f64], gt: &[bool], mask: &[bool]) -> Result<(RocCurve, f64)> {
    check_len("gt", probs.len(), gt.len())?;
    check_len("mask", probs.len(), mask.len())?;
    let mut pairs: Vec<(f64, bool)> = probs
        .iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &y), _)| (p, y))
        .collect();
    let positives = pairs.iter().filter(|p| p.1).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::DegenerateClass { positives, negatives });
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

    let (pn, nn) = (positives as f64, negatives as f64);
    let mut points = vec![(0.0, 0.0)];
    // Twice the area in units of one (positive, negative) cell, kept exact.
    let mut area2: u128 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < pairs.len() {
        let score = pairs[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < pairs.len() && pairs[i].0 == score {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / nn, tp as f64 / pn));
    }
    let auc = area2 as f64 / (2.0 * pn * nn);
    Ok((RocCurve { points }, auc))
}
