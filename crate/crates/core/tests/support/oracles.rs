//! Brute-force reference implementations used as test oracles.

use rand::Rng;

use fedssl::eval::ScoredSet;
use fedssl::rng;

/// Counts every positive/negative pair directly.
pub fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Youden's J at every observed threshold; returns `(threshold, J)` with the
/// smallest threshold among maximizers.
pub fn exhaustive_youden(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for &t in &thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &y)| y && s >= t).count() as f64;
        let tn = scores.iter().zip(labels).filter(|(&s, &y)| !y && s < t).count() as f64;
        let j = tp / pos + tn / neg - 1.0;
        if j > best.1 + 1e-12 {
            best = (t, j);
        }
    }
    best
}

/// Random scored set with both classes; half the sets use coarse scores to
/// force ties.
pub fn random_set(seed: u64, max_n: usize) -> ScoredSet {
    let mut r = rng::substream(seed, "random-set", "");
    let n = r.random_range(2..=max_n);
    let coarse = r.random_bool(0.5);
    let rate = r.random_range(0.05..0.95);
    let shift = r.random_range(0.0..1.5);
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(rate)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = labels
        .iter()
        .map(|&y| {
            let s: f64 = r.random::<f64>() + if y { shift } else { 0.0 };
            let s = s / 2.5;
            if coarse {
                (s * 10.0).round() / 10.0
            } else {
                s
            }
        })
        .collect();
    ScoredSet::new("random", scores, labels).expect("valid set")
}
