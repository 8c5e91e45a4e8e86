//! ROC analysis: exact AUC, the ROC curve, percentile bootstrap intervals
//! and the Youden operating point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes (positives {pos}, negatives {neg})"
        )));
    }
    Ok((pos, neg))
}

/// Exact Mann-Whitney counts: (2 * wins + ties, positive x negative pairs).
/// AUC is the ratio `numerator / (2 * pairs)`.
pub fn auc_counts(scores: &[f64], labels: &[bool]) -> Result<(u128, u128)> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice = 0u128;
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        twice += 2 * p * neg_below + p * q;
        neg_below += q;
        i = j;
    }
    Ok((twice, pos as u128 * neg as u128))
}

/// P(score_pos > score_neg) + P(tie) / 2.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (num, pairs) = auc_counts(scores, labels)?;
    Ok(num as f64 / (2 * pairs) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Predict positive when score >= threshold. The first point uses +inf.
    pub threshold: f64,
}

/// ROC curve at every distinct score, from (0, 0) to (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(out)
}

/// Linear-interpolation quantile of sorted data (`q` in [0, 1]).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
}

/// Resampling plan of one bootstrap replicate: indices drawn with
/// replacement from a generator seeded with `seed + replicate`, redrawn
/// until both classes appear.
pub fn bootstrap_indices(labels: &[bool], seed: u64, replicate: u64) -> Vec<usize> {
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(replicate));
    loop {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let pos = idx.iter().filter(|&&i| labels[i]).count();
        if pos > 0 && pos < n {
            return idx;
        }
    }
}

/// Percentile bootstrap interval of the AUC over patients. The interval is
/// widened if needed so it always contains the point estimate.
pub fn bootstrap_ci(scores: &[f64], labels: &[bool], n_boot: usize, level: f64, seed: u64) -> Result<ConfidenceInterval> {
    let point = roc_auc(scores, labels)?;
    if n_boot == 0 {
        return Err(Error::invalid("n_boot must be >= 1"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    let mut aucs = (0..n_boot as u64)
        .into_par_iter()
        .map(|b| {
            let idx = bootstrap_indices(labels, seed, b);
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            roc_auc(&s, &l)
        })
        .collect::<Result<Vec<f64>>>()?;
    aucs.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(ConfidenceInterval {
        lo: quantile_sorted(&aucs, alpha).min(point),
        hi: quantile_sorted(&aucs, 1.0 - alpha).max(point),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Predict positive when score >= threshold.
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub youden_j: f64,
    /// No cut achieves J > 0.
    pub degenerate: bool,
}

/// Cut maximizing Youden's J over every distinct score; ties go to the
/// lower threshold.
pub fn operating_point(scores: &[f64], labels: &[bool]) -> Result<OperatingPoint> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // ascending sweep: at each distinct threshold, everything at or above is positive
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut best: Option<(i128, OperatingPoint)> = None;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let tp = pos - pos_below;
        let tn = neg_below;
        // J * pos * neg, exact in integers
        let j_num = tp as i128 * neg as i128 + tn as i128 * pos as i128 - (pos * neg) as i128;
        if best.as_ref().is_none_or(|(b, _)| j_num > *b) {
            let sens = tp as f64 / pos as f64;
            let spec = tn as f64 / neg as f64;
            best = Some((
                j_num,
                OperatingPoint {
                    threshold: t,
                    sensitivity: sens,
                    specificity: spec,
                    youden_j: j_num as f64 / (pos * neg) as f64,
                    degenerate: j_num <= 0,
                },
            ));
        }
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    Ok(best.expect("non-empty input").1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert_eq!(roc_auc(&s, &l).unwrap(), 0.75);
        assert_eq!(brute_auc(&s, &l), 0.75);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn curve_endpoints() {
        let c = roc_curve(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!((c[0].fpr, c[0].tpr), (0.0, 0.0));
        let last = c.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        // trapezoid area equals the rank AUC
        let area: f64 = c.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum();
        assert!((area - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_ci_is_degenerate() {
        let s: Vec<f64> = (0..30).map(|i| if i < 15 { i as f64 } else { 100.0 + i as f64 }).collect();
        let l: Vec<bool> = (0..30).map(|i| i >= 15).collect();
        let ci = bootstrap_ci(&s, &l, 500, 0.95, 1).unwrap();
        assert_eq!((ci.lo, ci.hi), (1.0, 1.0));
    }

    #[test]
    fn operating_point_examples() {
        let op = operating_point(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!((op.sensitivity, op.specificity), (1.0, 1.0));
        assert_eq!(op.threshold, 0.8);

        let op = operating_point(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        // cuts 0.35 and 0.8 both reach J = 0.5; the lower wins
        assert_eq!(op.threshold, 0.35);
        assert_eq!((op.sensitivity, op.specificity, op.youden_j), (1.0, 0.5, 0.5));

        let op = operating_point(&[0.5; 4], &[false, true, false, true]).unwrap();
        assert!(op.degenerate);
        assert_eq!((op.sensitivity, op.specificity), (1.0, 0.0));
    }
}
