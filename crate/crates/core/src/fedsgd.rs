//! Federated SGD with stale-gradient reuse.
//!
//! Each round the server broadcasts `w^t` to `N` sampled clients. A sampled
//! client averages `H` per-point gradients drawn with replacement from its
//! shard, all evaluated at `w^t`. Unsampled clients keep the gradient they
//! uploaded last time. The server then forms `g^t = sum_k p_k g_k` over all
//! `K` clients and steps `w^{t+1} = w^t - eta g^t`.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::ParamVector;
use crate::loss::{
    self, generate_dataset, DataConfig, DatasetShard, FederatedDataset, GradientSampling,
    LossModel,
};
use crate::rng::{self, Purpose, StreamRng};
use crate::staleness::{self, SelectionPlan, StalenessMode, StalenessTracker};

/// Any parameter norm above this aborts the run.
pub const DIVERGENCE_NORM: f64 = 1e12;
pub const DEFAULT_HISTORY_WINDOW: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaRule {
    Fixed(f64),
    /// `eta = 1 / sqrt(L T)`
    Theorem,
}

impl EtaRule {
    pub fn resolve(&self, smoothness: f64, rounds: usize) -> Result<f64> {
        let eta = match *self {
            EtaRule::Fixed(eta) => eta,
            EtaRule::Theorem => 1.0 / (smoothness * rounds.max(1) as f64).sqrt(),
        };
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::config(format!("step size must be positive, got {eta}")));
        }
        Ok(eta)
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub clients: usize,
    pub per_round: usize,
    pub local_steps: usize,
    pub rounds: usize,
    pub eta: EtaRule,
    pub model: LossModel,
    pub data: DataConfig,
    pub staleness: StalenessMode,
    pub seed: u64,
    /// Make round 0 a full-participation round instead of starting every
    /// unsampled client from a zero gradient.
    pub warm_start: bool,
    /// Initial parameter; zero when absent.
    pub w0: Option<Vec<f64>>,
    /// Keep a copy of `w^t` in every record.
    pub record_w: bool,
    /// How many past parameters synthetic mode keeps for stale evaluations.
    pub history_window: usize,
    pub sampling: GradientSampling,
}

impl RunConfig {
    /// A config with `w0 = 0`, theorem step size, emergent staleness and
    /// `H = 1`; callers adjust fields from there.
    pub fn new(model: LossModel, data: DataConfig, per_round: usize, rounds: usize) -> Self {
        RunConfig {
            clients: data.clients,
            per_round,
            local_steps: 1,
            rounds,
            eta: EtaRule::Theorem,
            model,
            data,
            staleness: StalenessMode::Emergent,
            seed: 0,
            warm_start: false,
            w0: None,
            record_w: false,
            history_window: DEFAULT_HISTORY_WINDOW,
            sampling: GradientSampling::WithReplacement,
        }
    }

    pub fn plan(&self) -> Result<SelectionPlan> {
        SelectionPlan::new(self.clients, self.per_round, self.staleness)
    }

    pub fn beta(&self) -> f64 {
        staleness::beta(self.clients, self.per_round)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan()?;
        if self.data.clients != self.clients {
            return Err(Error::config(format!(
                "data has {} clients but the run expects K = {}",
                self.data.clients, self.clients
            )));
        }
        if self.local_steps < 1 {
            return Err(Error::config("H must be at least 1"));
        }
        if let EtaRule::Fixed(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::config(format!("eta must be positive, got {eta}")));
            }
        }
        if let Some(w0) = &self.w0 {
            check_dim(self.data.dim, w0.len())?;
        }
        if self.history_window < 1 {
            return Err(Error::config("history_window must be at least 1"));
        }
        if self.warm_start && self.staleness == StalenessMode::Synthetic {
            return Err(Error::config("warm_start applies to emergent staleness only"));
        }
        Ok(())
    }

    pub fn initial_point(&self) -> ParamVector {
        match &self.w0 {
            Some(w) => ParamVector::from_vec(w.clone()),
            None => ParamVector::zeros(self.data.dim),
        }
    }
}

/// Dataset, loss and smoothness constant shared by every replicate of an experiment.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: LossModel,
    pub data: FederatedDataset,
    pub smoothness: f64,
    pub planted: Option<ParamVector>,
}

impl Problem {
    pub fn generate(model: LossModel, data: &DataConfig) -> Result<Self> {
        let (fed, planted) = generate_dataset(&model, data)?;
        let mut p = Problem::from_dataset(model, fed)?;
        p.planted = Some(planted);
        Ok(p)
    }

    pub fn from_dataset(model: LossModel, data: FederatedDataset) -> Result<Self> {
        let smoothness = loss::smoothness_constant(&model, &data)?;
        Ok(Problem {
            model,
            data,
            smoothness,
            planted: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    /// Gradient the server currently holds for this client.
    pub last_gradient: ParamVector,
    pub staleness: u64,
    /// Round at which `last_gradient` was computed; `None` for the initial zero.
    pub computed_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub w: ParamVector,
    pub round: usize,
    pub g_agg: ParamVector,
}

/// Telemetry of one round, taken at `w^t` before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub w: Option<ParamVector>,
    /// `w^{t+1} - w^t`, always exactly `-eta * g_agg`.
    pub delta_w: ParamVector,
    pub g_agg: ParamVector,
    /// `grad f(w^t)`
    pub true_grad: ParamVector,
    pub grad_norm_sq: f64,
    pub loss: f64,
    pub selected: Vec<usize>,
    pub staleness: Vec<u64>,
    /// Round at which each client's aggregated gradient was computed (-1 for
    /// the zero initialization).
    pub gradient_rounds: Vec<i64>,
}

/// One client's `H`-sample gradient at the broadcast parameter.
pub fn local_gradient_estimate(
    model: &LossModel,
    shard: &DatasetShard,
    w: &[f64],
    local_steps: usize,
    rng: &mut StreamRng,
) -> Result<ParamVector> {
    loss::minibatch_gradient(
        model,
        shard,
        w,
        local_steps,
        GradientSampling::WithReplacement,
        rng,
    )
}

/// `sum_k p_k g_k`, accumulated in client order.
pub fn aggregate<G: AsRef<[f64]>>(gradients: &[G], weights: &[f64]) -> Result<ParamVector> {
    check_dim(weights.len(), gradients.len())?;
    let dim = gradients.first().map_or(0, |g| g.as_ref().len());
    let mut acc = ParamVector::zeros(dim);
    for (g, p) in gradients.iter().zip(weights) {
        check_dim(dim, g.as_ref().len())?;
        acc.axpy(*p, g.as_ref());
    }
    Ok(acc)
}

/// `w - eta g`. Fails with a divergence error tagged with `round` when the
/// result is non-finite or its norm exceeds [`DIVERGENCE_NORM`].
pub fn server_update(w: &[f64], g: &[f64], eta: f64, round: usize) -> Result<ParamVector> {
    check_dim(w.len(), g.len())?;
    let step = descent_step(g, eta);
    apply_step(w, &step, round)
}

fn descent_step(g: &[f64], eta: f64) -> ParamVector {
    ParamVector::from_vec(g.iter().map(|gi| -(eta * gi)).collect())
}

fn apply_step(w: &[f64], step: &[f64], round: usize) -> Result<ParamVector> {
    let next = ParamVector::from_vec(w.iter().zip(step).map(|(a, b)| a + b).collect());
    if !next.is_finite() {
        return Err(Error::Divergence {
            round,
            reason: "non-finite parameter".into(),
            partial: Vec::new(),
        });
    }
    let norm = next.norm();
    if norm > DIVERGENCE_NORM {
        return Err(Error::Divergence {
            round,
            reason: format!("parameter norm {norm:e} exceeds {DIVERGENCE_NORM:e}"),
            partial: Vec::new(),
        });
    }
    Ok(next)
}

/// Stepwise driver for one run.
pub struct Simulation<'a> {
    problem: &'a Problem,
    config: &'a RunConfig,
    plan: SelectionPlan,
    eta: f64,
    server: ServerState,
    clients: Vec<ClientState>,
    tracker: StalenessTracker,
    /// Synthetic mode: `w^s` for `s` in `[history_start, round]`.
    history: VecDeque<ParamVector>,
    history_start: usize,
    clamped_draws: u64,
}

impl<'a> Simulation<'a> {
    pub fn new(problem: &'a Problem, config: &'a RunConfig) -> Result<Self> {
        config.validate()?;
        check_dim(config.clients, problem.data.num_clients())?;
        check_dim(problem.data.dim(), config.data.dim)?;
        let plan = config.plan()?;
        let eta = config.eta.resolve(problem.smoothness, config.rounds)?;
        let d = problem.data.dim();
        let w0 = config.initial_point();
        let clients = (0..config.clients)
            .map(|id| ClientState {
                id,
                last_gradient: ParamVector::zeros(d),
                staleness: 0,
                computed_at: None,
            })
            .collect();
        let mut history = VecDeque::new();
        if config.staleness == StalenessMode::Synthetic {
            history.push_back(w0.clone());
        }
        Ok(Simulation {
            problem,
            config,
            plan,
            eta,
            server: ServerState {
                w: w0,
                round: 0,
                g_agg: ParamVector::zeros(d),
            },
            clients,
            tracker: StalenessTracker::new(config.clients),
            history,
            history_start: 0,
            clamped_draws: 0,
        })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    /// Synthetic draws that reached past the stored history window.
    pub fn clamped_draws(&self) -> u64 {
        self.clamped_draws
    }

    /// Executes round `t = server.round` and advances the state to `t + 1`.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let t = self.server.round;
        let (selected, staleness, gradient_rounds) = match self.config.staleness {
            StalenessMode::Emergent => self.refresh_emergent(t)?,
            StalenessMode::Synthetic => self.refresh_synthetic(t)?,
        };

        let model = &self.problem.model;
        let data = &self.problem.data;
        let grads: Vec<&[f64]> = self.clients.iter().map(|c| &*c.last_gradient).collect();
        let g_agg = aggregate(&grads, data.weights())?;
        let true_grad = loss::global_grad(model, data, &self.server.w)?;
        let loss_value = loss::global_loss(model, data, &self.server.w)?;
        let delta_w = descent_step(&g_agg, self.eta);
        let next = apply_step(&self.server.w, &delta_w, t)?;

        let record = RoundRecord {
            t,
            w: self.config.record_w.then(|| self.server.w.clone()),
            grad_norm_sq: true_grad.norm_sq(),
            delta_w,
            g_agg: g_agg.clone(),
            true_grad,
            loss: loss_value,
            selected,
            staleness,
            gradient_rounds,
        };

        self.server = ServerState {
            w: next,
            round: t + 1,
            g_agg,
        };
        if self.config.staleness == StalenessMode::Synthetic {
            self.history.push_back(self.server.w.clone());
            while self.history.len() > self.config.history_window + 1 {
                self.history.pop_front();
                self.history_start += 1;
            }
        }
        Ok(record)
    }

    fn refresh_emergent(&mut self, t: usize) -> Result<(Vec<usize>, Vec<u64>, Vec<i64>)> {
        let selected = if self.config.warm_start && t == 0 {
            (0..self.config.clients).collect()
        } else {
            staleness::select_round(&self.plan, self.config.seed, t)
        };
        let model = &self.problem.model;
        for &k in &selected {
            let shard = &self.problem.data.shards()[k];
            let mut rng = rng::stream(self.config.seed, Purpose::LocalSampling, t as u64, k as u64);
            let g = local_gradient_estimate(model, shard, &self.server.w, self.config.local_steps, &mut rng)?;
            let c = &mut self.clients[k];
            c.last_gradient = g;
            c.computed_at = Some(t);
        }
        self.tracker.advance(&selected)?;
        for (c, &tau) in self.clients.iter_mut().zip(self.tracker.tau()) {
            c.staleness = tau;
        }
        let rounds = self
            .clients
            .iter()
            .map(|c| c.computed_at.map_or(-1, |r| r as i64))
            .collect();
        Ok((selected, self.tracker.tau().to_vec(), rounds))
    }

    fn refresh_synthetic(&mut self, t: usize) -> Result<(Vec<usize>, Vec<u64>, Vec<i64>)> {
        let draws = staleness::sample_synthetic_staleness(&self.plan, self.config.seed, t);
        let model = &self.problem.model;
        let mut staleness = Vec::with_capacity(draws.len());
        let mut rounds = Vec::with_capacity(draws.len());
        for (k, &tau) in draws.iter().enumerate() {
            // No history before w^0.
            let mut source = t - (tau.min(t as u64) as usize);
            if source < self.history_start {
                source = self.history_start;
                self.clamped_draws += 1;
            }
            let w_hist = &self.history[source - self.history_start];
            let shard = &self.problem.data.shards()[k];
            // Keyed by the source round so g_k^s is the same quantity whenever it is reused.
            let mut rng = rng::stream(self.config.seed, Purpose::LocalSampling, source as u64, k as u64);
            let g = local_gradient_estimate(model, shard, w_hist, self.config.local_steps, &mut rng)?;
            let c = &mut self.clients[k];
            c.last_gradient = g;
            c.computed_at = Some(source);
            c.staleness = (t - source) as u64;
            staleness.push(c.staleness);
            rounds.push(source as i64);
        }
        let selected = staleness
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 0)
            .map(|(k, _)| k)
            .collect();
        Ok((selected, staleness, rounds))
    }
}

/// Output of [`run_training`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub eta: f64,
    pub records: Vec<RoundRecord>,
    pub final_w: ParamVector,
    pub clamped_draws: u64,
}

/// Runs `config.rounds` rounds from `w^0`. On divergence the error carries
/// every record completed before the failing round.
pub fn run_training(problem: &Problem, config: &RunConfig) -> Result<Trajectory> {
    let mut sim = Simulation::new(problem, config)?;
    let mut records = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        match sim.run_round() {
            Ok(r) => records.push(r),
            Err(Error::Divergence { round, reason, .. }) => {
                return Err(Error::Divergence {
                    round,
                    reason,
                    partial: records,
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Trajectory {
        eta: sim.eta,
        final_w: sim.server.w.clone(),
        clamped_draws: sim.clamped_draws,
        records,
    })
}

/// Runs one replicate per seed in parallel and reduces each to `summarize(trajectory)`.
/// Output order follows `seeds`, independent of scheduling.
pub fn run_replicates<T, F>(
    problem: &Problem,
    config: &RunConfig,
    seeds: &[u64],
    summarize: F,
) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(Trajectory) -> T + Sync,
{
    seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = config.clone();
            cfg.seed = seed;
            run_training(problem, &cfg).map(&summarize)
        })
        .collect()
}

/// Replays `w^0 - eta * sum g_agg` from a record log.
pub fn replay(w0: &[f64], records: &[RoundRecord], eta: f64) -> Result<ParamVector> {
    let mut w = ParamVector::from_vec(w0.to_vec());
    for r in records {
        w = server_update(&w, &r.g_agg, eta, r.t)?;
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{DataPoint, Partition};

    fn data(clients: usize, n: usize, dim: usize) -> DataConfig {
        DataConfig {
            clients,
            points_per_client: n,
            dim,
            partition: Partition::Iid,
            noise_std: 0.1,
            identical_points: false,
            seed: 11,
        }
    }

    #[test]
    fn aggregate_examples() {
        let g = [1.0, -2.0, 0.5];
        let out = aggregate(&[g, g, g], &[0.2, 0.3, 0.5]).unwrap();
        for (a, b) in out.iter().zip(g) {
            assert!((a - b).abs() < 1e-15);
        }
        let out = aggregate(&[[1.0, 0.0], [0.0, 1.0]], &[0.25, 0.75]).unwrap();
        assert_eq!(&*out, &[0.25, 0.75]);
        assert!(matches!(aggregate(&[[1.0]], &[0.5, 0.5]), Err(Error::Shape { .. })));
        assert!(matches!(aggregate(&[vec![1.0], vec![1.0, 2.0]], &[0.5, 0.5]), Err(Error::Shape { .. })));
    }

    #[test]
    fn server_update_examples() {
        assert_eq!(&*server_update(&[1.0, 1.0], &[0.0, 0.0], 0.3, 0).unwrap(), &[1.0, 1.0]);
        assert_eq!(&*server_update(&[1.0, 1.0], &[2.0, -2.0], 0.5, 0).unwrap(), &[0.0, 2.0]);
        match server_update(&[1.0], &[f64::INFINITY], 0.5, 17) {
            Err(Error::Divergence { round, .. }) => assert_eq!(round, 17),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(matches!(server_update(&[0.0], &[-1e13], 1.0, 0), Err(Error::Divergence { .. })));
    }

    #[test]
    fn single_point_single_sample_is_point_gradient() {
        let m = LossModel::logistic(0.05);
        let p = DataPoint::new(vec![0.3, -1.2], 1.0);
        let shard = DatasetShard::new(0, vec![p.clone()]).unwrap();
        let mut rng = rng::stream(1, Purpose::LocalSampling, 0, 0);
        let g = local_gradient_estimate(&m, &shard, &[0.4, 0.1], 1, &mut rng).unwrap();
        assert_eq!(g, loss::point_grad(&m, &[0.4, 0.1], &p).unwrap());
    }

    #[test]
    fn zero_rounds_returns_initial_point() {
        let p = Problem::generate(LossModel::quadratic(0.0), &data(3, 4, 2)).unwrap();
        let mut cfg = RunConfig::new(p.model, data(3, 4, 2), 2, 0);
        cfg.w0 = Some(vec![0.5, -0.5]);
        let tr = run_training(&p, &cfg).unwrap();
        assert!(tr.records.is_empty());
        assert_eq!(&*tr.final_w, &[0.5, -0.5]);
    }

    #[test]
    fn unselected_clients_start_from_zero() {
        let d = data(6, 5, 3);
        let p = Problem::generate(LossModel::quadratic(0.0), &d).unwrap();
        let mut cfg = RunConfig::new(p.model, d, 2, 1);
        cfg.eta = EtaRule::Fixed(0.1);
        let mut sim = Simulation::new(&p, &cfg).unwrap();
        let rec = sim.run_round().unwrap();
        let fresh: Vec<ParamVector> = rec
            .selected
            .iter()
            .map(|&k| sim.clients()[k].last_gradient.clone())
            .collect();
        let weights: Vec<f64> = rec.selected.iter().map(|&k| p.data.weights()[k]).collect();
        let expect = aggregate(&fresh, &weights).unwrap();
        assert_eq!(rec.g_agg, expect);
        for c in sim.clients() {
            if !rec.selected.contains(&c.id) {
                assert!(c.last_gradient.iter().all(|&v| v == 0.0));
                assert_eq!(c.computed_at, None);
            }
        }
    }

    #[test]
    fn warm_start_selects_everyone_first() {
        let d = data(5, 3, 2);
        let p = Problem::generate(LossModel::quadratic(0.0), &d).unwrap();
        let mut cfg = RunConfig::new(p.model, d, 1, 3);
        cfg.warm_start = true;
        let tr = run_training(&p, &cfg).unwrap();
        assert_eq!(tr.records[0].selected, vec![0, 1, 2, 3, 4]);
        assert_eq!(tr.records[1].selected.len(), 1);
    }

    #[test]
    fn invalid_configs_rejected() {
        let d = data(4, 3, 2);
        let p = Problem::generate(LossModel::quadratic(0.0), &d).unwrap();
        let mut cfg = RunConfig::new(p.model, d.clone(), 2, 3);
        cfg.eta = EtaRule::Fixed(0.0);
        assert!(matches!(run_training(&p, &cfg), Err(Error::Config(_))));
        let mut cfg = RunConfig::new(p.model, d.clone(), 2, 3);
        cfg.local_steps = 0;
        assert!(matches!(run_training(&p, &cfg), Err(Error::Config(_))));
        let mut cfg = RunConfig::new(p.model, d.clone(), 5, 3);
        cfg.per_round = 5;
        assert!(matches!(run_training(&p, &cfg), Err(Error::Config(_))));
        let mut cfg = RunConfig::new(p.model, d, 2, 3);
        cfg.w0 = Some(vec![1.0]);
        assert!(matches!(run_training(&p, &cfg), Err(Error::Shape { .. })));
    }

    #[test]
    fn divergence_keeps_partial_records() {
        let d = data(2, 5, 2);
        let p = Problem::generate(LossModel::quadratic(0.0), &d).unwrap();
        let mut cfg = RunConfig::new(p.model, d, 2, 500);
        cfg.eta = EtaRule::Fixed(50.0);
        cfg.w0 = Some(vec![1.0, 1.0]);
        match run_training(&p, &cfg) {
            Err(Error::Divergence { round, partial, .. }) => {
                assert!(round > 0);
                assert_eq!(partial.len(), round);
            }
            other => panic!("expected divergence, got {:?}", other.map(|t| t.records.len())),
        }
    }

    #[test]
    fn synthetic_history_clamps_to_window() {
        let d = data(10, 4, 2);
        let p = Problem::generate(LossModel::quadratic(0.0), &d).unwrap();
        let mut cfg = RunConfig::new(p.model, d, 1, 30);
        cfg.staleness = StalenessMode::Synthetic;
        cfg.history_window = 2;
        cfg.eta = EtaRule::Fixed(0.01);
        let mut sim = Simulation::new(&p, &cfg).unwrap();
        for _ in 0..30 {
            let rec = sim.run_round().unwrap();
            assert!(rec.staleness.iter().all(|&s| s as usize <= 2.min(rec.t)));
        }
        assert!(sim.clamped_draws() > 0);
    }
}
