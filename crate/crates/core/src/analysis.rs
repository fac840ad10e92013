//! Empirical checks of the implicit-momentum identity, gradient coherence and
//! the convergence bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedsgd::{run_replicates, EtaRule, Problem, RoundRecord, RunConfig, Trajectory};
use crate::linalg::{dot, ParamVector};
use crate::loss::{self, GradientSampling, LossKind};
use crate::staleness::StalenessMode;

/// Residual coordinates must lie within this many standard errors of zero.
pub const LEMMA_Z_THRESHOLD: f64 = 4.0;
/// Residuals this small count as zero regardless of their standard error.
pub const LEMMA_ABS_FLOOR: f64 = 1e-10;
pub const LEMMA_MIN_REPLICATES: usize = 100;
pub const DEFAULT_EPSILON_GUARD: f64 = 1e-16;
pub const SIGMA2_CHECKPOINTS: usize = 10;

/// Seeds `base, base + 1, ...`.
pub fn replicate_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumRound {
    pub t: usize,
    /// `mean(dw_t) - beta mean(dw_{t-1}) + (1 - beta) eta mean(grad f(w^t))`
    pub residual: Vec<f64>,
    pub std_error: Vec<f64>,
    /// Largest `|residual| / std_error` over coordinates not below the absolute floor.
    pub max_abs_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumReport {
    pub mode: StalenessMode,
    pub beta: f64,
    pub eta: f64,
    pub replicates: usize,
    pub t_max: usize,
    pub rounds: Vec<MomentumRound>,
    pub max_abs_z: f64,
    pub max_abs_residual: f64,
    pub sufficient_replicates: bool,
    pub passed: bool,
}

fn z_score(mean: f64, se: f64) -> f64 {
    if mean.abs() <= LEMMA_ABS_FLOOR {
        0.0
    } else if se > 0.0 {
        mean.abs() / se
    } else {
        f64::INFINITY
    }
}

/// Replicate estimate of the momentum-identity residual for rounds `1..=t_max`,
/// under whatever staleness mode `config` selects. Replicates share data and
/// `w^0` and differ only in their seed.
pub fn momentum_residual(
    problem: &Problem,
    config: &RunConfig,
    replicates: usize,
    t_max: usize,
) -> Result<MomentumReport> {
    if replicates == 0 || t_max == 0 {
        return Err(Error::config("momentum check needs replicates >= 1 and t_max >= 1"));
    }
    let eta = config.eta.resolve(problem.smoothness, config.rounds)?;
    let beta = config.beta();
    let mut cfg = config.clone();
    cfg.eta = EtaRule::Fixed(eta);
    cfg.rounds = t_max + 1;

    let seeds = replicate_seeds(config.seed, replicates);
    // Per replicate: residual samples for t = 1..=t_max, flattened.
    let samples = run_replicates(problem, &cfg, &seeds, |tr: Trajectory| {
        let recs = &tr.records;
        (1..=t_max)
            .map(|t| {
                let (cur, prev) = (&recs[t], &recs[t - 1]);
                cur.delta_w
                    .iter()
                    .zip(prev.delta_w.iter())
                    .zip(cur.true_grad.iter())
                    .map(|((dw, dw_prev), g)| dw - beta * dw_prev + (1.0 - beta) * eta * g)
                    .collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let d = problem.data.dim();
    let mut rounds = Vec::with_capacity(t_max);
    for ti in 0..t_max {
        let mut residual = vec![0.0; d];
        let mut std_error = vec![0.0; d];
        for j in 0..d {
            let column: Vec<f64> = samples.iter().map(|rep| rep[ti][j]).collect();
            let (mean, se) = loss::mean_and_std_error(&column);
            residual[j] = mean;
            std_error[j] = se;
        }
        let max_abs_z = residual
            .iter()
            .zip(&std_error)
            .map(|(&m, &se)| z_score(m, se))
            .fold(0.0, f64::max);
        rounds.push(MomentumRound {
            t: ti + 1,
            residual,
            std_error,
            max_abs_z,
        });
    }
    let max_abs_z = rounds.iter().map(|r| r.max_abs_z).fold(0.0, f64::max);
    let max_abs_residual = rounds
        .iter()
        .flat_map(|r| r.residual.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let sufficient_replicates = replicates >= LEMMA_MIN_REPLICATES;
    Ok(MomentumReport {
        mode: config.staleness,
        beta,
        eta,
        replicates,
        t_max,
        rounds,
        max_abs_z,
        max_abs_residual,
        sufficient_replicates,
        passed: sufficient_replicates && max_abs_z <= LEMMA_Z_THRESHOLD,
    })
}

/// Checks `E[dw_t] = beta E[dw_{t-1}] - (1 - beta) eta E[g^t]` under i.i.d.
/// geometric staleness. Emergent staleness is rejected; use
/// [`momentum_residual`] for it as a diagnostic.
pub fn verify_lemma1(
    problem: &Problem,
    config: &RunConfig,
    replicates: usize,
    t_max: usize,
) -> Result<MomentumReport> {
    if config.staleness != StalenessMode::Synthetic {
        return Err(Error::Mode(
            "the momentum identity is verified under synthetic (i.i.d.) staleness only".into(),
        ));
    }
    momentum_residual(problem, config, replicates, t_max)
}

/// `mu_t` and the number of past rounds skipped by the norm guard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    pub mu: f64,
    pub skipped: usize,
}

/// `min_{s <= t} <g_s, g_t> / ||g_s||^2`, skipping rounds with `||g_s||^2 < guard`.
pub fn gradient_coherence<G: AsRef<[f64]>>(
    history: &[G],
    t: usize,
    epsilon_guard: f64,
) -> Result<Coherence> {
    if t >= history.len() {
        return Err(Error::config(format!(
            "coherence at round {t} needs {} gradients, got {}",
            t + 1,
            history.len()
        )));
    }
    let current = history[t].as_ref();
    let mut mu = f64::INFINITY;
    let mut skipped = 0;
    for past in &history[..=t] {
        let past = past.as_ref();
        let norm_sq = dot(past, past);
        if norm_sq < epsilon_guard {
            skipped += 1;
            continue;
        }
        mu = mu.min(dot(past, current) / norm_sq);
    }
    if mu.is_infinite() {
        return Err(Error::UndefinedCoherence { skipped });
    }
    Ok(Coherence { mu, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceSeries {
    /// `mu_t`, `None` where every past round fell below the guard.
    pub mu: Vec<Option<f64>>,
    /// Running minimum of the defined `mu_t`; non-increasing.
    pub running_min: Vec<f64>,
    pub mu_min: f64,
    pub skipped: usize,
    pub epsilon_guard: f64,
}

pub fn coherence_series<G: AsRef<[f64]>>(history: &[G], epsilon_guard: f64) -> Result<CoherenceSeries> {
    let mut mu = Vec::with_capacity(history.len());
    let mut running_min = Vec::with_capacity(history.len());
    let mut current_min = f64::INFINITY;
    let mut skipped = 0;
    for t in 0..history.len() {
        match gradient_coherence(history, t, epsilon_guard) {
            Ok(c) => {
                current_min = current_min.min(c.mu);
                skipped += c.skipped;
                mu.push(Some(c.mu));
            }
            Err(Error::UndefinedCoherence { skipped: s }) => {
                skipped += s;
                mu.push(None);
            }
            Err(e) => return Err(e),
        }
        running_min.push(current_min);
    }
    if current_min.is_infinite() {
        return Err(Error::UndefinedCoherence { skipped });
    }
    Ok(CoherenceSeries {
        mu,
        running_min,
        mu_min: current_min,
        skipped,
        epsilon_guard,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub smoothness: f64,
    pub f0: f64,
    pub fstar: f64,
    pub sigma2: f64,
    pub mu: f64,
    pub beta: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub bound: f64,
    /// Whether `(1 - (1 - mu) beta) sqrt(T / L) >= 2`, the large-`T`
    /// condition under which the bound was derived.
    pub valid: bool,
}

/// `2 sqrt(L) (f0 - f* + sigma^2) / ((1 - (1 - mu) beta) sqrt(T))`.
pub fn theorem_bound(inputs: &BoundInputs) -> Result<BoundValue> {
    let BoundInputs {
        smoothness: l,
        f0,
        fstar,
        sigma2,
        mu,
        beta,
        rounds,
    } = *inputs;
    if l.is_nan() || l <= 0.0 || rounds == 0 {
        return Err(Error::Domain(format!(
            "bound needs L > 0 and T >= 1 (got L = {l}, T = {rounds})"
        )));
    }
    let contraction = 1.0 - (1.0 - mu) * beta;
    if contraction.is_nan() || contraction <= 0.0 {
        return Err(Error::BoundInapplicable(contraction));
    }
    let t = rounds as f64;
    Ok(BoundValue {
        bound: 2.0 * l.sqrt() * (f0 - fstar + sigma2) / (contraction * t.sqrt()),
        valid: contraction * (t / l).sqrt() >= 2.0,
    })
}

/// `min_t ||grad f(w^t)||^2` over one run.
pub fn min_grad_norm(records: &[RoundRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::config("min_grad_norm needs at least one record"));
    }
    Ok(records.iter().map(|r| r.grad_norm_sq).fold(f64::INFINITY, f64::min))
}

/// Per-round mean across runs, then the minimum over rounds.
pub fn min_mean_grad_norm(runs: &[Vec<f64>]) -> Result<f64> {
    let mean = mean_curve(runs)?;
    Ok(mean.into_iter().fold(f64::INFINITY, f64::min))
}

/// Per-round mean of equally long series.
pub fn mean_curve(runs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = runs.first().map(Vec::len).unwrap_or(0);
    if len == 0 || runs.iter().any(|r| r.len() != len) {
        return Err(Error::config("runs must be nonempty and of equal length"));
    }
    let m = runs.len() as f64;
    Ok((0..len)
        .map(|t| runs.iter().map(|r| r[t]).sum::<f64>() / m)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub per_round: usize,
    pub rounds: usize,
    pub seeds: usize,
    pub beta: f64,
    pub eta: f64,
    pub smoothness: f64,
    pub f0: f64,
    pub fstar: f64,
    pub sigma2_at_w0: f64,
    pub sigma2_at_w0_std_error: f64,
    /// Largest estimate over the trajectory checkpoints; used in the bound.
    pub sigma2: f64,
    pub mu_measured: f64,
    /// `mu` entering the bound (floored when the measured value is not positive).
    pub mu: f64,
    pub coherence_skipped: usize,
    pub bound: f64,
    pub measured_min_grad_norm_sq: f64,
    pub valid: bool,
    pub hypothesis_ok: bool,
    pub asserted: bool,
    pub satisfied: bool,
    pub status: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremOptions {
    pub seeds: usize,
    pub sigma2_draws: usize,
    pub epsilon_guard: f64,
    /// Replacement `mu` when the measured coherence is not positive.
    pub mu_floor: f64,
}

impl Default for TheoremOptions {
    fn default() -> Self {
        TheoremOptions {
            seeds: 20,
            sigma2_draws: 200,
            epsilon_guard: DEFAULT_EPSILON_GUARD,
            mu_floor: 1e-12,
        }
    }
}

struct RunSummary {
    grad_norm_sq: Vec<f64>,
    true_grads: Vec<ParamVector>,
    checkpoints: Vec<ParamVector>,
}

fn checkpoint_rounds(rounds: usize) -> Vec<usize> {
    let n = SIGMA2_CHECKPOINTS.min(rounds);
    (0..n).map(|i| i * rounds / n).collect()
}

/// Measures one `(N, T)` cell of the convergence-bound experiment.
pub fn check_theorem_cell(
    problem: &Problem,
    base: &RunConfig,
    per_round: usize,
    rounds: usize,
    opts: &TheoremOptions,
) -> Result<BoundReport> {
    if base.staleness != StalenessMode::Emergent {
        return Err(Error::Mode("the bound check runs emergent staleness".into()));
    }
    if base.eta != EtaRule::Theorem {
        return Err(Error::config("the bound check requires the theorem step-size rule"));
    }
    if problem.model.kind != LossKind::Quadratic || problem.model.lambda.is_nan() || problem.model.lambda <= 0.0 {
        return Err(Error::config(
            "the bound check needs the quadratic model with lambda > 0",
        ));
    }
    if opts.seeds == 0 {
        return Err(Error::config("seeds must be at least 1"));
    }
    let mut cfg = base.clone();
    cfg.per_round = per_round;
    cfg.rounds = rounds;
    cfg.validate()?;
    let eta = cfg.eta.resolve(problem.smoothness, rounds)?;

    let model = &problem.model;
    let data = &problem.data;
    let w0 = cfg.initial_point();
    let f0 = loss::global_loss(model, data, &w0)?;
    let wstar = loss::quadratic_minimizer(model, data)?;
    let fstar = loss::global_loss(model, data, &wstar)?;

    let checkpoints = checkpoint_rounds(rounds);
    let seeds = replicate_seeds(cfg.seed, opts.seeds);
    let summaries = run_replicates(problem, &cfg, &seeds, |tr: Trajectory| {
        let mut w = w0.clone();
        let mut saved = Vec::new();
        for r in &tr.records {
            if checkpoints.contains(&r.t) {
                saved.push(w.clone());
            }
            w.axpy(1.0, &r.delta_w);
        }
        RunSummary {
            grad_norm_sq: tr.records.iter().map(|r| r.grad_norm_sq).collect(),
            true_grads: tr.records.into_iter().map(|r| r.true_grad).collect(),
            checkpoints: saved,
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let curves: Vec<Vec<f64>> = summaries.iter().map(|s| s.grad_norm_sq.clone()).collect();
    let measured = min_mean_grad_norm(&curves)?;

    let d = data.dim();
    let mut mean_grads = vec![ParamVector::zeros(d); rounds];
    for s in &summaries {
        for (acc, g) in mean_grads.iter_mut().zip(&s.true_grads) {
            acc.axpy(1.0 / summaries.len() as f64, g);
        }
    }
    let coherence = coherence_series(&mean_grads, opts.epsilon_guard)?;

    let at_w0 = loss::estimate_sigma2(
        model,
        data,
        &w0,
        cfg.local_steps,
        opts.sigma2_draws,
        cfg.seed,
        GradientSampling::WithReplacement,
    )?;
    let mut sigma2 = at_w0.sigma2;
    for (i, w) in summaries[0].checkpoints.iter().enumerate() {
        let est = loss::estimate_sigma2(
            model,
            data,
            w,
            cfg.local_steps,
            opts.sigma2_draws,
            cfg.seed.wrapping_add(1 + i as u64),
            GradientSampling::WithReplacement,
        )?;
        sigma2 = sigma2.max(est.sigma2);
    }

    let hypothesis_ok = coherence.mu_min > 0.0;
    let mu = if hypothesis_ok {
        coherence.mu_min
    } else {
        opts.mu_floor
    };
    let beta = cfg.beta();
    let value = theorem_bound(&BoundInputs {
        smoothness: problem.smoothness,
        f0,
        fstar,
        sigma2,
        mu,
        beta,
        rounds,
    })?;
    let asserted = value.valid && hypothesis_ok;
    let satisfied = measured <= value.bound;
    let status = match (hypothesis_ok, value.valid, satisfied) {
        (false, _, _) => "hypothesis violated",
        (true, false, _) => "large-T condition not met",
        (true, true, true) => "satisfied",
        (true, true, false) => "violated",
    };
    Ok(BoundReport {
        per_round,
        rounds,
        seeds: opts.seeds,
        beta,
        eta,
        smoothness: problem.smoothness,
        f0,
        fstar,
        sigma2_at_w0: at_w0.sigma2,
        sigma2_at_w0_std_error: at_w0.std_error,
        sigma2,
        mu_measured: coherence.mu_min,
        mu,
        coherence_skipped: coherence.skipped,
        bound: value.bound,
        measured_min_grad_norm_sq: measured,
        valid: value.valid,
        hypothesis_ok,
        asserted,
        satisfied,
        status: status.to_string(),
    })
}

/// One report per `(N, T)` pair, `N` varying fastest within each `T`.
pub fn check_theorem(
    problem: &Problem,
    base: &RunConfig,
    per_round_grid: &[usize],
    rounds_grid: &[usize],
    opts: &TheoremOptions,
) -> Result<Vec<BoundReport>> {
    if per_round_grid.is_empty() || rounds_grid.is_empty() {
        return Err(Error::config("grid axes must be nonempty"));
    }
    let mut out = Vec::new();
    for &t in rounds_grid {
        for &n in per_round_grid {
            out.push(check_theorem_cell(problem, base, n, t, opts)?);
        }
    }
    Ok(out)
}

/// First round whose squared gradient norm is at most `threshold`.
pub fn rounds_to_threshold(grad_norm_sq: &[f64], threshold: f64) -> Option<usize> {
    grad_norm_sq.iter().position(|&g| g <= threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub per_round: usize,
    pub beta: f64,
    pub seeds: usize,
    /// Mean over seeds; a seed that never reaches the threshold counts as `T`.
    pub mean_rounds_to_threshold: f64,
    pub unreached: usize,
    pub min_mean_grad_norm_sq: f64,
}

/// Summarizes the gradient-norm curves of one participation level.
pub fn scaling_row(
    per_round: usize,
    beta: f64,
    rounds: usize,
    curves: &[Vec<f64>],
    threshold: f64,
) -> Result<ScalingRow> {
    let hits: Vec<Option<usize>> = curves.iter().map(|c| rounds_to_threshold(c, threshold)).collect();
    let total: usize = hits.iter().map(|h| h.unwrap_or(rounds)).sum();
    Ok(ScalingRow {
        per_round,
        beta,
        seeds: curves.len(),
        mean_rounds_to_threshold: total as f64 / curves.len() as f64,
        unreached: hits.iter().filter(|h| h.is_none()).count(),
        min_mean_grad_norm_sq: min_mean_grad_norm(curves)?,
    })
}

/// Rounds-to-threshold for each participation level in `per_round_grid`.
pub fn scaling_study(
    problem: &Problem,
    base: &RunConfig,
    per_round_grid: &[usize],
    seeds: usize,
    threshold: f64,
) -> Result<Vec<ScalingRow>> {
    if per_round_grid.is_empty() || seeds == 0 {
        return Err(Error::config("scaling study needs a nonempty N grid and seeds >= 1"));
    }
    per_round_grid
        .iter()
        .map(|&n| {
            let mut cfg = base.clone();
            cfg.per_round = n;
            cfg.validate()?;
            let curves = run_replicates(problem, &cfg, &replicate_seeds(cfg.seed, seeds), |tr| {
                tr.records.iter().map(|r| r.grad_norm_sq).collect::<Vec<f64>>()
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            scaling_row(n, cfg.beta(), cfg.rounds, &curves, threshold)
        })
        .collect()
}

/// Whether `mean_rounds_to_threshold` never increases as `N` grows.
pub fn non_increasing_in_participation(rows: &[ScalingRow]) -> bool {
    let mut sorted: Vec<&ScalingRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.per_round);
    sorted
        .windows(2)
        .all(|w| w[1].mean_rounds_to_threshold <= w[0].mean_rounds_to_threshold)
}
