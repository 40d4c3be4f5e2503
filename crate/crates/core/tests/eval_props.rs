mod support;

use fedssl::eval::{
    auroc, bootstrap_compare, bootstrap_metric, bootstrap_report, roc_curve, trapezoid_area, youden_threshold,
    ScoredSet,
};
use rand::Rng;
use support::oracles::{exhaustive_youden, pair_count_auroc, random_set};

#[test]
fn auroc_agrees_with_pair_counting_and_trapezoid() {
    for seed in 0..1000 {
        let s = random_set(seed, 500);
        let fast = auroc(&s).unwrap();
        let oracle = pair_count_auroc(&s.scores, &s.labels);
        let trap = trapezoid_area(&roc_curve(&s).unwrap());
        assert!((fast - oracle).abs() < 1e-12, "seed {seed}: {fast} vs {oracle}");
        assert!((trap - oracle).abs() < 1e-12, "seed {seed}: {trap} vs {oracle}");
    }
}

#[test]
fn auroc_is_rank_invariant_and_complementary() {
    for seed in 0..200 {
        let s = random_set(seed, 300);
        let base = auroc(&s).unwrap();
        for map in [|x: f64| x * x * x, |x: f64| 1.0 / (1.0 + (-4.0 * x).exp())] {
            let t = ScoredSet::new("t", s.scores.iter().map(|&x| map(x)).collect(), s.labels.clone()).unwrap();
            assert!((auroc(&t).unwrap() - base).abs() < 1e-12);
        }
        let flipped = ScoredSet::new("f", s.scores.iter().map(|x| 1.0 - x).collect(), s.labels.clone()).unwrap();
        assert!((auroc(&flipped).unwrap() + base - 1.0).abs() < 1e-12);
    }
}

#[test]
fn roc_curve_is_monotone_from_origin_to_corner() {
    for seed in 0..100 {
        let pts = roc_curve(&random_set(seed, 200)).unwrap();
        assert_eq!(pts[0], (0.0, 0.0));
        assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
        assert!(pts.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
    }
}

#[test]
fn youden_matches_exhaustive_scan() {
    for seed in 0..1000 {
        let s = random_set(seed + 5000, 200);
        let op = youden_threshold(&s).unwrap();
        let (t, j) = exhaustive_youden(&s.scores, &s.labels);
        assert_eq!(op.threshold, t, "seed {seed}");
        assert!((op.youden_j() - j).abs() < 1e-12);
    }
}

#[test]
fn bootstrap_is_seed_deterministic() {
    let s = random_set(42, 300);
    let a = bootstrap_report(std::slice::from_ref(&s), 1000, 7).unwrap();
    let b = bootstrap_report(std::slice::from_ref(&s), 1000, 7).unwrap();
    assert_eq!(a, b);
    let c = bootstrap_report(std::slice::from_ref(&s), 1000, 8).unwrap();
    assert_ne!(a.labels[0].draws, c.labels[0].draws);
    let sm = a.labels[0].auroc;
    assert!(sm.ci_lo <= sm.mean && sm.mean <= sm.ci_hi);
}

#[test]
fn paired_comparison_extremes_and_symmetry() {
    let labels: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
    let perfect = ScoredSet::new("p", labels.iter().map(|&y| if y { 0.9 } else { 0.1 }).collect(), labels.clone()).unwrap();
    let anti = ScoredSet::new("p", labels.iter().map(|&y| if y { 0.1 } else { 0.9 }).collect(), labels.clone()).unwrap();
    let r = bootstrap_compare(&perfect, &anti, 1000, 3).unwrap();
    assert!(r.p_value < 0.01);
    assert_eq!(r.diffs.len(), 1000);

    let a = random_set(11, 150);
    let noisy = ScoredSet::new(
        "random",
        a.scores.iter().enumerate().map(|(i, s)| s + ((i * 7) % 5) as f64 * 0.05).collect(),
        a.labels.clone(),
    )
    .unwrap();
    let ab = bootstrap_compare(&a, &noisy, 1000, 5).unwrap();
    let ba = bootstrap_compare(&noisy, &a, 1000, 5).unwrap();
    assert_eq!(ab.p_value, ba.p_value);

    let other = ScoredSet::new("random", a.scores.clone(), a.labels.iter().map(|y| !y).collect()).unwrap();
    assert!(bootstrap_compare(&a, &other, 10, 1).is_err());
}

#[test]
fn percentile_interval_covers_full_sample_auroc() {
    let mut covered = 0;
    for trial in 0..100u64 {
        let mut r = fedssl::rng::substream(trial, "calibration", "");
        let labels: Vec<bool> = (0..500).map(|_| r.random_bool(0.4)).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&y| r.random::<f64>() + if y { 0.4 } else { 0.0 })
            .collect();
        let s = ScoredSet::new("c", scores, labels).unwrap();
        let full = auroc(&s).unwrap();
        let sm = bootstrap_metric(&s, 1000, trial).unwrap();
        if sm.ci_lo <= full && full <= sm.ci_hi {
            covered += 1;
        }
    }
    assert!(covered >= 95, "covered {covered}/100");
}

#[test]
fn average_row_is_mean_of_label_rows() {
    let a = random_set(1, 300);
    let mut shifted = a.labels.clone();
    shifted.rotate_left(1);
    let b = ScoredSet::new("other", a.scores.iter().map(|s| s * s).collect(), shifted).unwrap();
    let rep = bootstrap_report(&[a, b], 500, 4).unwrap();
    let mean_of_means = (rep.labels[0].auroc.mean + rep.labels[1].auroc.mean) / 2.0;
    assert!((rep.average.mean - mean_of_means).abs() < 1e-12);
}
