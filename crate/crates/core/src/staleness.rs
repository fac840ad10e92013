//! Client selection and per-client staleness.
//!
//! Staleness can be produced two ways. `Emergent` staleness comes from the
//! actual selection history, so a client's staleness is correlated from one
//! round to the next. `Synthetic` staleness draws every client's staleness
//! i.i.d. from `Geometric(1 - beta)` each round.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StalenessMode {
    Emergent,
    Synthetic,
}

impl StalenessMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StalenessMode::Emergent => "emergent",
            StalenessMode::Synthetic => "synthetic",
        }
    }
}

/// `N` of `K` clients participate in every round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPlan {
    clients: usize,
    per_round: usize,
    pub mode: StalenessMode,
}

impl SelectionPlan {
    pub fn new(clients: usize, per_round: usize, mode: StalenessMode) -> Result<Self> {
        if per_round < 1 || per_round > clients {
            return Err(Error::config(format!(
                "N must satisfy 1 <= N <= K (got N = {per_round}, K = {clients})"
            )));
        }
        Ok(SelectionPlan {
            clients,
            per_round,
            mode,
        })
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn per_round(&self) -> usize {
        self.per_round
    }

    /// Probability that a given client is skipped in a round, `1 - N/K`.
    pub fn beta(&self) -> f64 {
        beta(self.clients, self.per_round)
    }
}

pub fn beta(clients: usize, per_round: usize) -> f64 {
    1.0 - per_round as f64 / clients as f64
}

/// Draws `N` distinct clients uniformly; the result is sorted ascending.
pub fn sample_clients<R: Rng + ?Sized>(plan: &SelectionPlan, rng: &mut R) -> Vec<usize> {
    let mut picked = index::sample(rng, plan.clients, plan.per_round).into_vec();
    picked.sort_unstable();
    picked
}

/// The participating set of `round` for a run seeded with `seed`.
pub fn select_round(plan: &SelectionPlan, seed: u64, round: usize) -> Vec<usize> {
    let mut rng = rng::stream(seed, Purpose::Selection, round as u64, 0);
    sample_clients(plan, &mut rng)
}

/// `P(tau = l) = beta^l (1 - beta)`.
pub fn geometric_pmf(beta: f64, l: u64) -> Result<f64> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Domain(format!("beta must lie in [0, 1), got {beta}")));
    }
    Ok(beta.powf(l as f64) * (1.0 - beta))
}

/// Rounds elapsed since each client last refreshed its gradient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessTracker {
    tau: Vec<u64>,
}

impl StalenessTracker {
    pub fn new(clients: usize) -> Self {
        StalenessTracker {
            tau: vec![0; clients],
        }
    }

    pub fn from_values(tau: Vec<u64>) -> Self {
        StalenessTracker { tau }
    }

    pub fn tau(&self) -> &[u64] {
        &self.tau
    }

    /// Resets the selected clients to 0 and ages everyone else by one round.
    pub fn advance(&mut self, selected: &[usize]) -> Result<()> {
        if let Some(&bad) = selected.iter().find(|&&k| k >= self.tau.len()) {
            return Err(Error::Internal(format!(
                "client index {bad} out of range for {} clients",
                self.tau.len()
            )));
        }
        for t in &mut self.tau {
            *t += 1;
        }
        for &k in selected {
            self.tau[k] = 0;
        }
        Ok(())
    }
}

/// Inverse-CDF draw from `Geometric(1 - beta)` on `{0, 1, 2, ...}`.
pub fn sample_geometric<R: Rng + ?Sized>(beta: f64, rng: &mut R) -> u64 {
    if beta <= 0.0 {
        return 0;
    }
    // u in (0, 1]; P(floor(ln u / ln beta) >= l) = P(u <= beta^l) = beta^l.
    let u = 1.0 - rng.random::<f64>();
    (u.ln() / beta.ln()).floor() as u64
}

/// One i.i.d. staleness value per client for the given round.
pub fn sample_synthetic_staleness(plan: &SelectionPlan, seed: u64, round: usize) -> Vec<u64> {
    let mut rng = rng::stream(seed, Purpose::Staleness, round as u64, 0);
    let b = plan.beta();
    (0..plan.clients).map(|_| sample_geometric(b, &mut rng)).collect()
}

/// Counts of observed staleness values, with everything above `max_l` pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StalenessHistogram {
    counts: Vec<u64>,
    overflow: u64,
    total: u64,
}

impl StalenessHistogram {
    pub fn new(max_l: usize) -> Self {
        StalenessHistogram {
            counts: vec![0; max_l + 1],
            overflow: 0,
            total: 0,
        }
    }

    pub fn max_l(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn record(&mut self, tau: &[u64]) {
        for &t in tau {
            match self.counts.get_mut(t as usize) {
                Some(c) => *c += 1,
                None => self.overflow += 1,
            }
            self.total += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, l: usize) -> u64 {
        self.counts.get(l).copied().unwrap_or(0)
    }

    pub fn overflow(&self) -> u64 {
        self.overflow
    }

    pub fn empirical_pmf(&self, l: usize) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.count(l) as f64 / self.total as f64
    }

    pub fn mean(&self) -> f64 {
        let s: f64 = self
            .counts
            .iter()
            .enumerate()
            .map(|(l, &c)| l as f64 * c as f64)
            .sum();
        s / self.total as f64
    }

    /// `0.5 * sum_{l=0}^{max_l} |empirical(l) - beta^l (1 - beta)|`.
    pub fn tv_distance(&self, beta: f64) -> Result<f64> {
        let mut acc = 0.0;
        for l in 0..=self.max_l() {
            acc += (self.empirical_pmf(l) - geometric_pmf(beta, l as u64)?).abs();
        }
        Ok(0.5 * acc)
    }
}

/// Runs `rounds` rounds of selection only (no training) and pools the
/// per-client staleness observed after every round.
pub fn staleness_survey(
    plan: &SelectionPlan,
    seed: u64,
    rounds: usize,
    max_l: usize,
) -> StalenessHistogram {
    let mut hist = StalenessHistogram::new(max_l);
    match plan.mode {
        StalenessMode::Emergent => {
            let mut tracker = StalenessTracker::new(plan.clients);
            for t in 0..rounds {
                let selected = select_round(plan, seed, t);
                tracker
                    .advance(&selected)
                    .expect("selection only yields in-range clients");
                hist.record(tracker.tau());
            }
        }
        StalenessMode::Synthetic => {
            for t in 0..rounds {
                hist.record(&sample_synthetic_staleness(plan, seed, t));
            }
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_participation_selects_everyone() {
        let plan = SelectionPlan::new(5, 5, StalenessMode::Emergent).unwrap();
        for t in 0..10 {
            assert_eq!(select_round(&plan, 3, t), vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn selection_has_requested_cardinality() {
        let plan = SelectionPlan::new(10, 3, StalenessMode::Emergent).unwrap();
        for t in 0..50 {
            let s = select_round(&plan, 9, t);
            assert_eq!(s.len(), 3);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(s.iter().all(|&k| k < 10));
        }
    }

    #[test]
    fn invalid_plans_rejected() {
        assert!(matches!(SelectionPlan::new(10, 0, StalenessMode::Emergent), Err(Error::Config(_))));
        assert!(matches!(SelectionPlan::new(3, 4, StalenessMode::Emergent), Err(Error::Config(_))));
    }

    #[test]
    fn pmf_values() {
        assert!((geometric_pmf(0.9, 0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(geometric_pmf(0.5, 2).unwrap(), 0.125);
        assert_eq!(geometric_pmf(0.0, 0).unwrap(), 1.0);
        assert_eq!(geometric_pmf(0.0, 3).unwrap(), 0.0);
        assert!(matches!(geometric_pmf(1.0, 0), Err(Error::Domain(_))));
        assert!(matches!(geometric_pmf(-0.1, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn advance_resets_and_ages() {
        let mut tr = StalenessTracker::from_values(vec![5, 2, 0]);
        tr.advance(&[0]).unwrap();
        assert_eq!(tr.tau(), &[0, 3, 1]);
        assert!(matches!(tr.advance(&[3]), Err(Error::Internal(_))));
    }

    #[test]
    fn zero_beta_synthetic_is_all_zero() {
        let plan = SelectionPlan::new(6, 6, StalenessMode::Synthetic).unwrap();
        assert_eq!(sample_synthetic_staleness(&plan, 1, 0), vec![0; 6]);
    }

    #[test]
    fn histogram_tv_of_exact_counts() {
        let mut h = StalenessHistogram::new(3);
        h.record(&[0, 0, 1, 7]);
        assert_eq!(h.total(), 4);
        assert_eq!(h.overflow(), 1);
        assert_eq!(h.empirical_pmf(0), 0.5);
        // beta = 0: pmf is a point mass at 0
        assert!((h.tv_distance(0.0).unwrap() - 0.5 * (0.5 + 0.25)).abs() < 1e-15);
    }
}
