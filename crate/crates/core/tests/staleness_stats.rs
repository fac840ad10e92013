//! Statistical checks of client selection and staleness sampling.

#![allow(clippy::needless_range_loop)]

use stalefed::staleness::{self, SelectionPlan, StalenessMode, StalenessTracker};

#[test]
fn selection_is_uniform() {
    let plan = SelectionPlan::new(10, 1, StalenessMode::Emergent).unwrap();
    let draws = 100_000;
    let mut counts = [0u64; 10];
    for t in 0..draws {
        for k in staleness::select_round(&plan, 77, t) {
            counts[k] += 1;
        }
    }
    let expected = draws as f64 / 10.0;
    let mut chi2 = 0.0;
    for &c in &counts {
        assert!((c as f64 / draws as f64 - 0.1).abs() <= 0.01);
        chi2 += (c as f64 - expected).powi(2) / expected;
    }
    // 9 degrees of freedom: P(chi2 > 27.88) = 0.001.
    assert!(chi2 < 27.88, "chi2 = {chi2}");
}

#[test]
fn selection_has_no_repeats() {
    let plan = SelectionPlan::new(30, 12, StalenessMode::Emergent).unwrap();
    for t in 0..500 {
        let s = staleness::select_round(&plan, 3, t);
        assert_eq!(s.len(), 12);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|&k| k < 30));
    }
}

#[test]
fn synthetic_draws_match_geometric_moments() {
    let plan = SelectionPlan::new(20, 5, StalenessMode::Synthetic).unwrap();
    let beta = plan.beta();
    let rounds = 20_000;
    let mut n = 0.0;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut zeros = 0.0;
    for t in 0..rounds {
        for tau in staleness::sample_synthetic_staleness(&plan, 8, t) {
            let v = tau as f64;
            n += 1.0;
            sum += v;
            sum_sq += v * v;
            if tau == 0 {
                zeros += 1.0;
            }
        }
    }
    let mean = sum / n;
    let var = sum_sq / n - mean * mean;
    let target = beta / (1.0 - beta);
    assert!((mean - target).abs() <= 4.0 * (var / n).sqrt(), "mean {mean} vs {target}");
    let p0 = 1.0 - beta;
    assert!((zeros / n - p0).abs() <= 4.0 * (p0 * (1.0 - p0) / n).sqrt());
}

#[test]
fn synthetic_draws_are_uncorrelated_across_rounds() {
    let plan = SelectionPlan::new(10, 5, StalenessMode::Synthetic).unwrap();
    let rounds = 100_000;
    let series: Vec<Vec<u64>> = (0..rounds).map(|t| staleness::sample_synthetic_staleness(&plan, 19, t)).collect();
    let mut total = 0.0;
    for k in 0..10 {
        let x: Vec<f64> = series.iter().map(|r| r[k] as f64).collect();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let cov: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        total += cov / var;
    }
    let rho = total / 10.0;
    assert!(rho.abs() < 0.01, "lag-1 autocorrelation {rho}");
}

#[test]
fn tracker_counts_rounds_since_selection() {
    let plan = SelectionPlan::new(6, 2, StalenessMode::Emergent).unwrap();
    let mut tracker = StalenessTracker::new(6);
    let mut last: Vec<Option<usize>> = vec![None; 6];
    for t in 0..300 {
        let sel = staleness::select_round(&plan, 2, t);
        tracker.advance(&sel).unwrap();
        for &k in &sel {
            last[k] = Some(t);
        }
        for k in 0..6 {
            if let Some(s) = last[k] {
                assert_eq!(tracker.tau()[k], (t - s) as u64);
            }
        }
    }
}

#[test]
fn emergent_survey_mean_is_geometric() {
    let plan = SelectionPlan::new(40, 10, StalenessMode::Emergent).unwrap();
    let hist = staleness::staleness_survey(&plan, 12, 20_000, 200);
    let target = plan.beta() / (1.0 - plan.beta());
    assert!((hist.mean() - target).abs() < 0.05, "{} vs {target}", hist.mean());
    assert!(hist.tv_distance(plan.beta()).unwrap() < 0.01);
}
