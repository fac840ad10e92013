//! Synthetic federated datasets, per-point losses, and the local/global
//! empirical objectives built from them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, ParamVector, SymMatrix};
use crate::rng::{self, Purpose, StreamRng};

/// Relative residual tolerance for the power iteration behind `smoothness_constant`.
pub const POWER_ITERATION_TOL: f64 = 1e-8;
pub const POWER_ITERATION_MAX_STEPS: usize = 10_000;

/// Fraction of a label-skewed shard that carries the shard's majority sign.
pub const LABEL_SKEW_MAJORITY: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `0.5 * (<x, w> - y)^2`
    Quadratic,
    /// `log(1 + exp(-y <x, w>))` with `y` in `{-1, +1}`
    Logistic,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Quadratic => "quadratic",
            LossKind::Logistic => "logistic",
        }
    }
}

/// A per-point loss plus an optional ridge term `(lambda / 2) ||w||^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: LossKind,
    pub lambda: f64,
}

impl LossModel {
    pub fn new(kind: LossKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!(
                "regularization must be finite and nonnegative, got {lambda}"
            )));
        }
        Ok(LossModel { kind, lambda })
    }

    pub fn quadratic(lambda: f64) -> Self {
        LossModel {
            kind: LossKind::Quadratic,
            lambda,
        }
    }

    pub fn logistic(lambda: f64) -> Self {
        LossModel {
            kind: LossKind::Logistic,
            lambda,
        }
    }

    /// Curvature scale of the data term: the loss Hessian is at most
    /// `factor * x x^T` per point.
    fn curvature_factor(&self) -> f64 {
        match self.kind {
            LossKind::Quadratic => 1.0,
            LossKind::Logistic => 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub x: Vec<f64>,
    pub y: f64,
}

impl DataPoint {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        DataPoint { x, y }
    }
}

/// The local dataset of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    pub owner: usize,
    pub points: Vec<DataPoint>,
}

impl DatasetShard {
    pub fn new(owner: usize, points: Vec<DataPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::config(format!("shard {owner} is empty")));
        }
        let d = points[0].x.len();
        for p in &points {
            check_dim(d, p.x.len())?;
            if !p.y.is_finite() || p.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("shard {owner} holds a non-finite point")));
            }
        }
        Ok(DatasetShard { owner, points })
    }

    pub fn size(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.points[0].x.len()
    }
}

/// All client shards together with their aggregation weights `p_k = n_k / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    shards: Vec<DatasetShard>,
    weights: Vec<f64>,
    total: usize,
    dim: usize,
}

impl FederatedDataset {
    pub fn new(shards: Vec<DatasetShard>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::config("a federated dataset needs at least one shard"));
        }
        let dim = shards[0].dim();
        for s in &shards {
            check_dim(dim, s.dim())?;
        }
        let total: usize = shards.iter().map(DatasetShard::size).sum();
        let weights = shards
            .iter()
            .map(|s| s.size() as f64 / total as f64)
            .collect();
        Ok(FederatedDataset {
            shards,
            weights,
            total,
            dim,
        })
    }

    pub fn shards(&self) -> &[DatasetShard] {
        &self.shards
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn points(&self) -> impl Iterator<Item = &DataPoint> {
        self.shards.iter().flat_map(|s| s.points.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Iid,
    LabelSkew,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Iid => "iid",
            Partition::LabelSkew => "label_skew",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub clients: usize,
    pub points_per_client: usize,
    pub dim: usize,
    pub partition: Partition,
    pub noise_std: f64,
    /// Every shard repeats a single point, which removes all sampling noise.
    pub identical_points: bool,
    pub seed: u64,
}

/// Generates a planted-model dataset and returns it with the planted parameter.
///
/// Features are standard Gaussian. Quadratic labels are `<x, w*> + noise`;
/// logistic labels are `sign(<x, w*> + noise)`, so label flips become more
/// likely as `noise_std` grows. Under `LabelSkew` shard `k` holds 80% of
/// `+1` labels when `k` is even and 80% of `-1` labels otherwise.
pub fn generate_dataset(
    model: &LossModel,
    cfg: &DataConfig,
) -> Result<(FederatedDataset, ParamVector)> {
    if cfg.clients == 0 || cfg.points_per_client == 0 || cfg.dim == 0 {
        return Err(Error::config(
            "clients, points_per_client and dim must all be at least 1",
        ));
    }
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) {
        return Err(Error::config("noise_std must be finite and nonnegative"));
    }
    if cfg.partition == Partition::LabelSkew {
        if model.kind == LossKind::Quadratic {
            return Err(Error::config(
                "label_skew partition requires the logistic model",
            ));
        }
        if cfg.identical_points {
            return Err(Error::config(
                "label_skew partition cannot be combined with identical_points",
            ));
        }
    }

    let mut planted_rng = rng::stream(cfg.seed, Purpose::Data, u64::MAX, 0);
    let planted: Vec<f64> = (0..cfg.dim)
        .map(|_| planted_rng.sample(StandardNormal))
        .collect();

    let shards = (0..cfg.clients)
        .map(|k| {
            let mut rng = rng::stream(cfg.seed, Purpose::Data, 0, k as u64);
            let points = if cfg.identical_points {
                let p = draw_point(model.kind, &planted, cfg.noise_std, &mut rng);
                vec![p; cfg.points_per_client]
            } else {
                match cfg.partition {
                    Partition::Iid => (0..cfg.points_per_client)
                        .map(|_| draw_point(model.kind, &planted, cfg.noise_std, &mut rng))
                        .collect(),
                    Partition::LabelSkew => {
                        let majority = if k % 2 == 0 { 1.0 } else { -1.0 };
                        draw_skewed_shard(&planted, cfg, majority, &mut rng)?
                    }
                }
            };
            DatasetShard::new(k, points)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((FederatedDataset::new(shards)?, ParamVector::from_vec(planted)))
}

fn draw_point(kind: LossKind, planted: &[f64], noise_std: f64, rng: &mut StreamRng) -> DataPoint {
    let x: Vec<f64> = (0..planted.len()).map(|_| rng.sample(StandardNormal)).collect();
    let z: f64 = rng.sample(StandardNormal);
    let signal = dot(&x, planted) + noise_std * z;
    let y = match kind {
        LossKind::Quadratic => signal,
        LossKind::Logistic => {
            if signal >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
    };
    DataPoint { x, y }
}

fn draw_skewed_shard(
    planted: &[f64],
    cfg: &DataConfig,
    majority: f64,
    rng: &mut StreamRng,
) -> Result<Vec<DataPoint>> {
    let n = cfg.points_per_client;
    let want_major = (LABEL_SKEW_MAJORITY * n as f64).round() as usize;
    let want_minor = n - want_major;
    let (mut major, mut minor) = (Vec::with_capacity(want_major), Vec::with_capacity(want_minor));
    // Labels are balanced in expectation, so this terminates quickly; the cap
    // only guards against a degenerate planted vector.
    let max_draws = 1000 * n + 1000;
    for _ in 0..max_draws {
        if major.len() == want_major && minor.len() == want_minor {
            break;
        }
        let p = draw_point(LossKind::Logistic, planted, cfg.noise_std, rng);
        if p.y == majority {
            if major.len() < want_major {
                major.push(p);
            }
        } else if minor.len() < want_minor {
            minor.push(p);
        }
    }
    if major.len() != want_major || minor.len() != want_minor {
        return Err(Error::Numerical(
            "could not fill label-skewed shard from the planted model".into(),
        ));
    }
    // Interleave deterministically so the minority class is spread through the shard.
    let mut points = major;
    for (i, p) in minor.into_iter().enumerate() {
        let pos = ((i * n) / want_minor.max(1)).min(points.len());
        points.insert(pos, p);
    }
    Ok(points)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn ridge(model: &LossModel, w: &[f64]) -> f64 {
    0.5 * model.lambda * dot(w, w)
}

/// Loss of a single data point at `w`.
pub fn point_loss(model: &LossModel, w: &[f64], p: &DataPoint) -> Result<f64> {
    check_dim(w.len(), p.x.len())?;
    let margin = dot(&p.x, w);
    let data = match model.kind {
        LossKind::Quadratic => 0.5 * (margin - p.y).powi(2),
        LossKind::Logistic => softplus(-p.y * margin),
    };
    Ok(data + ridge(model, w))
}

/// Closed-form gradient of [`point_loss`].
pub fn point_grad(model: &LossModel, w: &[f64], p: &DataPoint) -> Result<ParamVector> {
    let mut g = ParamVector::zeros(w.len());
    accumulate_point_grad(model, w, p, &mut g)?;
    Ok(g)
}

/// Adds the gradient of `point_loss` at `w` into `acc`.
pub(crate) fn accumulate_point_grad(
    model: &LossModel,
    w: &[f64],
    p: &DataPoint,
    acc: &mut [f64],
) -> Result<()> {
    check_dim(w.len(), p.x.len())?;
    check_dim(w.len(), acc.len())?;
    let margin = dot(&p.x, w);
    let coeff = match model.kind {
        LossKind::Quadratic => margin - p.y,
        LossKind::Logistic => -p.y * sigmoid(-p.y * margin),
    };
    for ((a, x), wi) in acc.iter_mut().zip(&p.x).zip(w) {
        *a += coeff * x + model.lambda * wi;
    }
    Ok(())
}

/// Mean loss over a client's shard, `f_k(w)`.
pub fn local_loss(model: &LossModel, shard: &DatasetShard, w: &[f64]) -> Result<f64> {
    if shard.points.is_empty() {
        return Err(Error::config("local loss of an empty shard"));
    }
    let mut sum = 0.0;
    for p in &shard.points {
        sum += point_loss(model, w, p)?;
    }
    Ok(sum / shard.size() as f64)
}

/// Mean gradient over a client's shard, `grad f_k(w)`.
pub fn local_grad(model: &LossModel, shard: &DatasetShard, w: &[f64]) -> Result<ParamVector> {
    if shard.points.is_empty() {
        return Err(Error::config("local gradient of an empty shard"));
    }
    let mut g = ParamVector::zeros(w.len());
    for p in &shard.points {
        accumulate_point_grad(model, w, p, &mut g)?;
    }
    g.scale(1.0 / shard.size() as f64);
    Ok(g)
}

/// `f(w) = sum_k p_k f_k(w)`.
pub fn global_loss(model: &LossModel, fed: &FederatedDataset, w: &[f64]) -> Result<f64> {
    check_dim(fed.dim(), w.len())?;
    let mut total = 0.0;
    for (shard, p) in fed.shards().iter().zip(fed.weights()) {
        total += p * local_loss(model, shard, w)?;
    }
    Ok(total)
}

/// `grad f(w) = sum_k p_k grad f_k(w)`.
pub fn global_grad(model: &LossModel, fed: &FederatedDataset, w: &[f64]) -> Result<ParamVector> {
    check_dim(fed.dim(), w.len())?;
    let mut g = ParamVector::zeros(w.len());
    for (shard, p) in fed.shards().iter().zip(fed.weights()) {
        g.axpy(*p, &local_grad(model, shard, w)?);
    }
    Ok(g)
}

/// A Lipschitz constant shared by every local gradient `grad f_k`.
///
/// The data Hessian of client `k` is bounded by `c * (1/n_k) X_k^T X_k` with
/// `c = 1` (quadratic) or `c = 1/4` (logistic); the ridge adds `lambda`.
pub fn smoothness_constant(model: &LossModel, fed: &FederatedDataset) -> Result<f64> {
    let mut worst = 0.0f64;
    for shard in fed.shards() {
        let gram = SymMatrix::scaled_gram(fed.dim(), shard.points.iter().map(|p| p.x.as_slice()));
        let top = gram.largest_eigenvalue(POWER_ITERATION_TOL, POWER_ITERATION_MAX_STEPS)?;
        worst = worst.max(top);
    }
    Ok(model.curvature_factor() * worst + model.lambda)
}

/// Unique minimizer of the ridge-regularized quadratic objective,
/// `(X^T X / n + lambda I)^{-1} X^T y / n` over the pooled data.
pub fn quadratic_minimizer(model: &LossModel, fed: &FederatedDataset) -> Result<ParamVector> {
    if model.kind != LossKind::Quadratic {
        return Err(Error::Domain(
            "closed-form minimizer exists only for the quadratic model".into(),
        ));
    }
    let d = fed.dim();
    // Shards are weighted by n_k / n, so the global objective is the pooled mean.
    let mut a = SymMatrix::scaled_gram(d, fed.points().map(|p| p.x.as_slice()));
    a.add_diagonal(model.lambda);
    let mut b = vec![0.0; d];
    for p in fed.points() {
        for (bi, xi) in b.iter_mut().zip(&p.x) {
            *bi += p.y * xi;
        }
    }
    b.iter_mut().for_each(|v| *v /= fed.total() as f64);
    Ok(ParamVector::from_vec(a.solve_spd(&b)?))
}

/// How a client turns its shard into a gradient estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSampling {
    /// Average of `H` points drawn uniformly with replacement.
    WithReplacement,
    /// Full pass over the shard; zero variance. Only used as an oracle.
    Exhaustive,
}

/// `(1/H) * sum_{s<H} grad l(w; x_{i_s}, y_{i_s})` with `i_s` drawn uniformly
/// with replacement from the shard. Every term is evaluated at the same `w`.
pub fn minibatch_gradient(
    model: &LossModel,
    shard: &DatasetShard,
    w: &[f64],
    local_steps: usize,
    sampling: GradientSampling,
    rng: &mut StreamRng,
) -> Result<ParamVector> {
    if shard.points.is_empty() {
        return Err(Error::config("gradient estimate on an empty shard"));
    }
    if local_steps == 0 {
        return Err(Error::config("H must be at least 1"));
    }
    match sampling {
        GradientSampling::Exhaustive => local_grad(model, shard, w),
        GradientSampling::WithReplacement => {
            let mut g = ParamVector::zeros(w.len());
            for _ in 0..local_steps {
                let i = rng.random_range(0..shard.size());
                accumulate_point_grad(model, w, &shard.points[i], &mut g)?;
            }
            g.scale(1.0 / local_steps as f64);
            Ok(g)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub sigma2: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of `E || sum_k p_k g_k - grad f(w) ||^2` where every
/// client contributes a fresh `H`-sample gradient.
pub fn estimate_sigma2(
    model: &LossModel,
    fed: &FederatedDataset,
    w: &[f64],
    local_steps: usize,
    draws: usize,
    seed: u64,
    sampling: GradientSampling,
) -> Result<VarianceEstimate> {
    if draws < 2 {
        return Err(Error::config("estimate_sigma2 needs at least 2 draws"));
    }
    let truth = global_grad(model, fed, w)?;
    let mut samples = Vec::with_capacity(draws);
    for draw in 0..draws {
        let mut agg = ParamVector::zeros(w.len());
        for (k, (shard, p)) in fed.shards().iter().zip(fed.weights()).enumerate() {
            let mut rng = rng::stream(seed, Purpose::Variance, draw as u64, k as u64);
            let g = minibatch_gradient(model, shard, w, local_steps, sampling, &mut rng)?;
            agg.axpy(*p, &g);
        }
        samples.push(agg.sub(&truth)?.norm_sq());
    }
    let (mean, se) = mean_and_std_error(&samples);
    Ok(VarianceEstimate {
        sigma2: mean,
        std_error: se,
    })
}

pub(crate) fn mean_and_std_error(samples: &[f64]) -> (f64, f64) {
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    if samples.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: &[f64], y: f64) -> DataPoint {
        DataPoint::new(x.to_vec(), y)
    }

    fn cfg(clients: usize, n: usize, dim: usize) -> DataConfig {
        DataConfig {
            clients,
            points_per_client: n,
            dim,
            partition: Partition::Iid,
            noise_std: 0.0,
            identical_points: false,
            seed: 7,
        }
    }

    #[test]
    fn noise_free_quadratic_labels_fit_exactly() {
        let model = LossModel::quadratic(0.0);
        let (fed, planted) = generate_dataset(&model, &cfg(1, 3, 2)).unwrap();
        for p in fed.points() {
            assert_eq!(p.y, dot(&p.x, &planted));
        }
    }

    #[test]
    fn equal_shards_have_equal_weights() {
        let (fed, _) = generate_dataset(&LossModel::quadratic(0.0), &cfg(4, 5, 3)).unwrap();
        assert_eq!(fed.total(), 20);
        assert!(fed.weights().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn same_seed_same_dataset() {
        let m = LossModel::logistic(0.0);
        let mut c = cfg(3, 10, 4);
        c.noise_std = 0.3;
        let a = generate_dataset(&m, &c).unwrap();
        let b = generate_dataset(&m, &c).unwrap();
        assert_eq!(a, b);
        c.seed = 8;
        assert_ne!(a.0, generate_dataset(&m, &c).unwrap().0);
    }

    #[test]
    fn generation_rejects_bad_configs() {
        let q = LossModel::quadratic(0.0);
        assert!(matches!(generate_dataset(&q, &cfg(0, 1, 1)), Err(Error::Config(_))));
        assert!(matches!(generate_dataset(&q, &cfg(1, 0, 1)), Err(Error::Config(_))));
        assert!(matches!(generate_dataset(&q, &cfg(1, 1, 0)), Err(Error::Config(_))));
        let mut skew = cfg(2, 10, 2);
        skew.partition = Partition::LabelSkew;
        assert!(matches!(generate_dataset(&q, &skew), Err(Error::Config(_))));
        let mut neg = cfg(2, 10, 2);
        neg.noise_std = -1.0;
        assert!(matches!(generate_dataset(&q, &neg), Err(Error::Config(_))));
    }

    #[test]
    fn label_skew_majority_fraction() {
        let model = LossModel::logistic(0.0);
        let mut fractions = Vec::new();
        for seed in 0..50 {
            let mut c = cfg(10, 100, 5);
            c.partition = Partition::LabelSkew;
            c.seed = seed;
            let (fed, _) = generate_dataset(&model, &c).unwrap();
            for shard in fed.shards() {
                let pos = shard.points.iter().filter(|p| p.y > 0.0).count() as f64;
                let frac = pos / shard.size() as f64;
                fractions.push(frac.max(1.0 - frac));
            }
        }
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        assert!((mean - 0.8).abs() <= 0.05, "mean majority fraction {mean}");
        assert!(fractions.iter().all(|f| (f - 0.8).abs() <= 0.05));
    }

    #[test]
    fn quadratic_loss_at_planted_is_ridge_only() {
        let w = [1.5, -2.0];
        let p = pt(&[0.3, 0.4], 0.3 * 1.5 - 0.4 * 2.0);
        assert!(point_loss(&LossModel::quadratic(0.0), &w, &p).unwrap().abs() < 1e-15);
        let l = point_loss(&LossModel::quadratic(0.2), &w, &p).unwrap();
        assert!((l - 0.1 * (1.5f64 * 1.5 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn logistic_loss_at_origin_is_ln2() {
        let l = point_loss(&LossModel::logistic(0.0), &[0.0, 0.0], &pt(&[3.0, -1.0], -1.0)).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_values() {
        let q = LossModel::quadratic(0.0);
        let p = pt(&[1.0, 0.0], 2.0);
        assert_eq!(point_loss(&q, &[0.0, 0.0], &p).unwrap(), 2.0);
        assert_eq!(&*point_grad(&q, &[0.0, 0.0], &p).unwrap(), &[-2.0, 0.0]);
        let g = point_grad(&LossModel::logistic(0.0), &[0.0, 0.0], &pt(&[1.0, 1.0], 1.0)).unwrap();
        assert_eq!(&*g, &[-0.5, -0.5]);
    }

    #[test]
    fn logistic_loss_is_finite_for_huge_margins() {
        let m = LossModel::logistic(0.0);
        let p = pt(&[1.0], 1.0);
        assert!((point_loss(&m, &[-1e4], &p).unwrap() - 1e4).abs() < 1e-6);
        assert!(point_loss(&m, &[1e4], &p).unwrap() >= 0.0);
        assert!(point_grad(&m, &[-1e4], &p).unwrap().is_finite());
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let p = pt(&[1.0, 2.0], 0.0);
        let m = LossModel::quadratic(0.0);
        assert!(matches!(point_loss(&m, &[1.0], &p), Err(Error::Shape { .. })));
        assert!(matches!(point_grad(&m, &[1.0, 2.0, 3.0], &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn mean_of_one_and_of_duplicates() {
        let m = LossModel::logistic(0.1);
        let p = pt(&[0.5, -1.0], -1.0);
        let w = [0.2, 0.7];
        let one = DatasetShard::new(0, vec![p.clone()]).unwrap();
        let two = DatasetShard::new(0, vec![p.clone(), p.clone()]).unwrap();
        let single = point_loss(&m, &w, &p).unwrap();
        assert_eq!(local_loss(&m, &one, &w).unwrap(), single);
        assert_eq!(local_loss(&m, &two, &w).unwrap(), single);
        assert_eq!(local_grad(&m, &two, &w).unwrap(), point_grad(&m, &w, &p).unwrap());
    }

    #[test]
    fn empty_shard_rejected() {
        assert!(matches!(DatasetShard::new(0, vec![]), Err(Error::Config(_))));
    }

    #[test]
    fn single_client_global_equals_local() {
        let m = LossModel::quadratic(0.3);
        let (fed, _) = generate_dataset(&m, &cfg(1, 8, 3)).unwrap();
        let w = [0.1, 0.2, -0.3];
        assert_eq!(global_loss(&m, &fed, &w).unwrap(), local_loss(&m, &fed.shards()[0], &w).unwrap());
    }

    #[test]
    fn identity_design_smoothness() {
        let d = 4;
        let points = (0..d)
            .map(|i| {
                let mut x = vec![0.0; d];
                x[i] = 1.0;
                pt(&x, 0.0)
            })
            .collect();
        let fed = FederatedDataset::new(vec![DatasetShard::new(0, points).unwrap()]).unwrap();
        let l0 = smoothness_constant(&LossModel::quadratic(0.0), &fed).unwrap();
        assert!((l0 - 0.25).abs() < 1e-12);
        let l1 = smoothness_constant(&LossModel::quadratic(0.5), &fed).unwrap();
        assert!((l1 - l0 - 0.5).abs() < 1e-12);
        let lg = smoothness_constant(&LossModel::logistic(0.0), &fed).unwrap();
        assert!((lg - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn minimizer_zeroes_gradient() {
        let m = LossModel::quadratic(0.1);
        let mut c = cfg(5, 20, 4);
        c.noise_std = 0.5;
        let (fed, _) = generate_dataset(&m, &c).unwrap();
        let w = quadratic_minimizer(&m, &fed).unwrap();
        assert!(global_grad(&m, &fed, &w).unwrap().norm() <= 1e-8);
        assert!(matches!(
            quadratic_minimizer(&LossModel::logistic(0.1), &fed),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn exhaustive_sampling_has_zero_variance() {
        let m = LossModel::quadratic(0.0);
        let mut c = cfg(3, 6, 2);
        c.noise_std = 1.0;
        let (fed, _) = generate_dataset(&m, &c).unwrap();
        let est = estimate_sigma2(&m, &fed, &[0.3, 0.3], 6, 10, 1, GradientSampling::Exhaustive).unwrap();
        assert!(est.sigma2 < 1e-28);
    }

    #[test]
    fn identical_points_have_zero_variance() {
        let m = LossModel::logistic(0.0);
        let mut c = cfg(4, 9, 3);
        c.identical_points = true;
        let (fed, _) = generate_dataset(&m, &c).unwrap();
        let est = estimate_sigma2(&m, &fed, &[0.5, -0.5, 1.0], 3, 20, 2, GradientSampling::WithReplacement).unwrap();
        assert!(est.sigma2 < 1e-28);
    }

    #[test]
    fn variance_needs_two_draws() {
        let (fed, _) = generate_dataset(&LossModel::quadratic(0.0), &cfg(1, 2, 1)).unwrap();
        assert!(estimate_sigma2(&LossModel::quadratic(0.0), &fed, &[0.0], 1, 1, 0, GradientSampling::WithReplacement).is_err());
    }
}
