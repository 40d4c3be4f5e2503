//! Bootstrap with replacement. Redraw `i` always draws from the `i`-th
//! substream of the seed, so results do not depend on evaluation order.
//! Resamples lacking a class for any label are rejected and redrawn from
//! the same substream.

use rand::Rng;
use serde::Serialize;

use super::roc::{auroc_indexed, metrics_at, youden_threshold, ScoredSet};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_REDRAWS: usize = 1000;
/// Rejected resamples tolerated per accepted one before giving up.
const MAX_REJECTIONS_PER_DRAW: usize = 1000;

/// Mean, sample SD and 2.5/97.5 percentiles of a bootstrap distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Linear interpolation between closest ranks of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (first, last) = (sorted[0], sorted[sorted.len() - 1]);
        if first == last {
            return Self { mean: first, sd: 0.0, ci_lo: first, ci_hi: first };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        Self {
            mean,
            sd,
            ci_lo: percentile(&sorted, 0.025),
            ci_hi: percentile(&sorted, 0.975),
        }
    }
}

/// Per-redraw values of one statistic.
pub type Distribution = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelReport {
    pub label: String,
    /// AUROC on the full test set.
    pub point: f64,
    pub auroc: Summary,
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    #[serde(skip)]
    pub draws: Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub labels: Vec<LabelReport>,
    pub average: Summary,
    pub redraws: usize,
    pub rejected: usize,
    pub seed: u64,
    #[serde(skip)]
    pub average_draws: Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub redraws: usize,
    pub diffs: Vec<f64>,
    pub p_value: f64,
    pub seed: u64,
    pub rejected: usize,
}

fn check_paired(sets: &[&ScoredSet]) -> Result<usize> {
    let first = sets
        .first()
        .ok_or_else(|| Error::contract("bootstrap needs at least one scored set"))?;
    for s in sets {
        if s.len() != first.len() {
            return Err(Error::contract(format!(
                "paired sets differ in size: {} vs {}",
                s.len(),
                first.len()
            )));
        }
    }
    Ok(first.len())
}

/// Draws `redraws` accepted index resamples and hands each to `visit`.
/// Returns the number of rejected resamples.
fn resample(
    n: usize,
    redraws: usize,
    seed: u64,
    label_columns: &[&[bool]],
    mut visit: impl FnMut(usize, &mut [usize]),
) -> Result<usize> {
    if redraws == 0 {
        return Err(Error::Config("bootstrap needs at least one redraw".into()));
    }
    let mut idx = vec![0usize; n];
    let mut rejected = 0;
    for i in 0..redraws {
        let mut r = rng::indexed_stream(seed, i as u64);
        let mut attempts = 0;
        loop {
            for v in idx.iter_mut() {
                *v = r.random_range(0..n);
            }
            let ok = label_columns.iter().all(|col| {
                let pos = idx.iter().filter(|&&k| col[k]).count();
                pos > 0 && pos < n
            });
            if ok {
                break;
            }
            rejected += 1;
            attempts += 1;
            if attempts > MAX_REJECTIONS_PER_DRAW {
                return Err(Error::UndefinedMetric(format!(
                    "redraw {i}: no resample with both classes in {attempts} attempts"
                )));
            }
        }
        visit(i, &mut idx);
    }
    Ok(rejected)
}

/// Bootstrap summary of one label's AUROC.
pub fn bootstrap_metric(set: &ScoredSet, redraws: usize, seed: u64) -> Result<Summary> {
    Ok(bootstrap_report(std::slice::from_ref(set), redraws, seed)?.labels[0].auroc)
}

/// Full report for the labels of one test set: per-label AUROC
/// distributions from shared resamples, Youden operating points on the full
/// set, and the averaged row.
pub fn bootstrap_report(sets: &[ScoredSet], redraws: usize, seed: u64) -> Result<MetricReport> {
    let refs: Vec<&ScoredSet> = sets.iter().collect();
    let n = check_paired(&refs)?;
    for s in sets {
        if s.labels != sets[0].labels && s.label_name == sets[0].label_name {
            return Err(Error::contract(format!("label `{}` repeated with different truth", s.label_name)));
        }
    }
    let mut points = Vec::with_capacity(sets.len());
    for s in sets {
        points.push((super::roc::auroc(s)?, youden_threshold(s)?));
    }
    let columns: Vec<&[bool]> = sets.iter().map(|s| s.labels.as_slice()).collect();
    let mut draws = vec![Vec::with_capacity(redraws); sets.len()];
    let rejected = resample(n, redraws, seed, &columns, |_, idx| {
        for (d, s) in draws.iter_mut().zip(sets) {
            d.push(auroc_indexed(&s.scores, &s.labels, idx).expect("accepted resample"));
        }
    })?;
    let labels: Vec<LabelReport> = sets
        .iter()
        .zip(points)
        .zip(draws)
        .map(|((s, (point, op)), draws)| {
            let (accuracy, _, _) = metrics_at(s, op.threshold);
            LabelReport {
                label: s.label_name.clone(),
                point,
                auroc: Summary::of(&draws),
                threshold: op.threshold,
                sensitivity: op.sensitivity,
                specificity: op.specificity,
                accuracy,
                draws,
            }
        })
        .collect();
    let per_label: Vec<&[f64]> = labels.iter().map(|l| l.draws.as_slice()).collect();
    let (average, average_draws) = average_report(&per_label)?;
    Ok(MetricReport {
        labels,
        average,
        redraws,
        rejected,
        seed,
        average_draws,
    })
}

/// Averages per-label bootstrap draws redraw by redraw, so the average has
/// its own distribution.
pub fn average_report(per_label: &[&[f64]]) -> Result<(Summary, Distribution)> {
    let redraws = per_label
        .first()
        .ok_or_else(|| Error::contract("average of zero labels"))?
        .len();
    if redraws == 0 || per_label.iter().any(|d| d.len() != redraws) {
        return Err(Error::contract(format!(
            "per-label redraw counts differ: {:?}",
            per_label.iter().map(|d| d.len()).collect::<Vec<_>>()
        )));
    }
    let k = per_label.len() as f64;
    let avg: Vec<f64> = (0..redraws)
        .map(|i| per_label.iter().map(|d| d[i]).sum::<f64>() / k)
        .collect();
    Ok((Summary::of(&avg), avg))
}

fn two_sided_p(diffs: &[f64]) -> f64 {
    let n = diffs.len() as f64;
    let le = diffs.iter().filter(|&&d| d <= 0.0).count() as f64 / n;
    let ge = diffs.iter().filter(|&&d| d >= 0.0).count() as f64 / n;
    (2.0 * le.min(ge)).min(1.0)
}

/// Paired comparison of two models scored on the same items:
/// `diff = auroc(a) - auroc(b)` per shared resample.
pub fn bootstrap_compare(a: &ScoredSet, b: &ScoredSet, redraws: usize, seed: u64) -> Result<BootstrapResult> {
    let (mut per_label, average) = bootstrap_compare_labels(
        std::slice::from_ref(a),
        std::slice::from_ref(b),
        redraws,
        seed,
    )?;
    let mut result = per_label.remove(0);
    result.rejected = average.rejected;
    Ok(result)
}

/// Paired comparison over several labels with one shared resample per redraw.
/// Returns a result per label and one for the label-averaged AUROC.
pub fn bootstrap_compare_labels(
    a: &[ScoredSet],
    b: &[ScoredSet],
    redraws: usize,
    seed: u64,
) -> Result<(Vec<BootstrapResult>, BootstrapResult)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::contract(format!("cannot pair {} labels with {}", a.len(), b.len())));
    }
    let refs: Vec<&ScoredSet> = a.iter().chain(b).collect();
    let n = check_paired(&refs)?;
    for (x, y) in a.iter().zip(b) {
        if x.labels != y.labels {
            return Err(Error::contract(format!(
                "pairing error: `{}` ground truth differs between models",
                x.label_name
            )));
        }
        super::roc::auroc(x)?;
    }
    let columns: Vec<&[bool]> = a.iter().map(|s| s.labels.as_slice()).collect();
    let mut diffs = vec![Vec::with_capacity(redraws); a.len()];
    let mut avg = Vec::with_capacity(redraws);
    let rejected = resample(n, redraws, seed, &columns, |_, idx| {
        let mut total = 0.0;
        for ((d, x), y) in diffs.iter_mut().zip(a).zip(b) {
            let ax = auroc_indexed(&x.scores, &x.labels, idx).expect("accepted resample");
            let by = auroc_indexed(&y.scores, &y.labels, idx).expect("accepted resample");
            d.push(ax - by);
            total += ax - by;
        }
        avg.push(total / a.len() as f64);
    })?;
    let wrap = |diffs: Vec<f64>| BootstrapResult {
        redraws,
        p_value: two_sided_p(&diffs),
        diffs,
        seed,
        rejected,
    };
    Ok((diffs.into_iter().map(wrap).collect(), wrap(avg)))
}
