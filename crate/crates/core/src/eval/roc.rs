use crate::error::{Error, Result};

/// Model scores for one label on a fixed test set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub label_name: String,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(label_name: impl Into<String>, scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(Error::contract(format!(
                "scored set needs matching non-empty arrays, got {} scores and {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::contract(format!("non-finite score {s}")));
        }
        Ok(Self {
            label_name: label_name.into(),
            scores,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(positives, negatives)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&y| y).count();
        (pos, self.labels.len() - pos)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (pos, neg) = self.class_counts();
        if pos == 0 || neg == 0 {
            return Err(Error::UndefinedMetric(format!(
                "`{}` has {pos} positives and {neg} negatives",
                self.label_name
            )));
        }
        Ok((pos, neg))
    }
}

/// Mann-Whitney statistic over index subset `idx` (with repetition).
/// `None` when a class is missing.
pub(crate) fn auroc_indexed(scores: &[f64], labels: &[bool], idx: &mut [usize]) -> Option<f64> {
    idx.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut pos, mut neg) = (0usize, 0usize);
    // wins counted in units of half a pair to keep ties exact
    let mut half_wins: u128 = 0;
    let mut neg_below = 0usize;
    let mut start = 0;
    while start < idx.len() {
        let value = scores[idx[start]];
        let mut end = start;
        let (mut p, mut n) = (0usize, 0usize);
        while end < idx.len() && scores[idx[end]] == value {
            if labels[idx[end]] {
                p += 1;
            } else {
                n += 1;
            }
            end += 1;
        }
        half_wins += (p as u128) * (2 * neg_below as u128 + n as u128);
        neg_below += n;
        pos += p;
        neg += n;
        start = end;
    }
    if pos == 0 || neg == 0 {
        return None;
    }
    Some(half_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

/// `(wins + 0.5 * ties) / (n_pos * n_neg)` over positive/negative pairs.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    set.require_both_classes()?;
    let mut idx: Vec<usize> = (0..set.len()).collect();
    Ok(auroc_indexed(&set.scores, &set.labels, &mut idx).expect("both classes present"))
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one step per distinct
/// score taken as a predict-positive-at-or-above threshold, highest first.
pub fn roc_curve(set: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = set.require_both_classes()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let value = set.scores[order[k]];
        while k < order.len() && set.scores[order[k]] == value {
            if set.labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl OperatingPoint {
    pub fn youden_j(&self) -> f64 {
        self.sensitivity + self.specificity - 1.0
    }
}

/// Observed score maximizing `sensitivity + specificity - 1` under
/// predict-positive when `score >= t`; ties go to the smallest threshold.
pub fn youden_threshold(set: &ScoredSet) -> Result<OperatingPoint> {
    let (pos, neg) = set.require_both_classes()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    // ascending scan: at threshold scores[order[k]], everything from k up is positive
    let (mut tp, mut tn) = (pos, 0usize);
    let mut best: Option<(i128, usize, usize, f64)> = None;
    let mut k = 0;
    while k < order.len() {
        let value = set.scores[order[k]];
        // J * pos * neg, exact in integers
        let j = tp as i128 * neg as i128 + tn as i128 * pos as i128 - (pos * neg) as i128;
        if best.is_none_or(|(bj, ..)| j > bj) {
            best = Some((j, tp, tn, value));
        }
        while k < order.len() && set.scores[order[k]] == value {
            if set.labels[order[k]] {
                tp -= 1;
            } else {
                tn += 1;
            }
            k += 1;
        }
    }
    let (_, tp, tn, threshold) = best.expect("non-empty set");
    Ok(OperatingPoint {
        threshold,
        sensitivity: tp as f64 / pos as f64,
        specificity: tn as f64 / neg as f64,
    })
}

/// `(accuracy, sensitivity, specificity)` at `score >= threshold`.
/// A rate with an empty denominator is reported as NaN.
pub fn metrics_at(set: &ScoredSet, threshold: f64) -> (f64, f64, f64) {
    let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in set.scores.iter().zip(&set.labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    (
        ratio(tp + tn, set.len()),
        ratio(tp, tp + fneg),
        ratio(tn, tn + fp),
    )
}
