//! Independent oracles for the numeric building blocks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use stalefed::fedsgd::{self, EtaRule, Problem, RunConfig};
use stalefed::loss::{self, DataConfig, FederatedDataset, GradientSampling, LossModel, Partition};
use stalefed::rng::{self, Purpose};
use stalefed::staleness::{self, SelectionPlan, StalenessMode};

fn data(clients: usize, n: usize, dim: usize, seed: u64) -> DataConfig {
    DataConfig {
        clients,
        points_per_client: n,
        dim,
        partition: Partition::Iid,
        noise_std: 0.5,
        identical_points: false,
        seed,
    }
}

fn design(points: &[&loss::DataPoint], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), dim, |i, j| points[i].x[j])
}

fn dense_lambda_max(fed: &FederatedDataset) -> f64 {
    fed.shards()
        .iter()
        .map(|s| {
            let pts: Vec<_> = s.points.iter().collect();
            let x = design(&pts, fed.dim());
            let gram = x.transpose() * &x / pts.len() as f64;
            gram.symmetric_eigen().eigenvalues.max()
        })
        .fold(0.0, f64::max)
}

#[test]
fn smoothness_matches_dense_eigensolver() {
    for (i, model) in [LossModel::quadratic(0.2), LossModel::logistic(0.05)].into_iter().enumerate() {
        let (fed, _) = loss::generate_dataset(&model, &data(6, 12, 7, 40 + i as u64)).unwrap();
        let factor = if i == 0 { 1.0 } else { 0.25 };
        let oracle = factor * dense_lambda_max(&fed) + model.lambda;
        let l = loss::smoothness_constant(&model, &fed).unwrap();
        assert!((l - oracle).abs() <= 1e-6 * oracle, "{l} vs {oracle}");
    }
}

#[test]
fn ridge_minimizer_matches_dense_solve() {
    let model = LossModel::quadratic(0.1);
    let (fed, _) = loss::generate_dataset(&model, &data(5, 9, 4, 3)).unwrap();
    let pts: Vec<_> = fed.points().collect();
    let x = design(&pts, 4);
    let y = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.y));
    let n = pts.len() as f64;
    let a = x.transpose() * &x / n + DMatrix::identity(4, 4) * 0.1;
    let b = x.transpose() * y / n;
    let oracle = a.lu().solve(&b).unwrap();
    let w = loss::quadratic_minimizer(&model, &fed).unwrap();
    for j in 0..4 {
        assert!((w[j] - oracle[j]).abs() < 1e-10);
    }
    assert!(loss::global_grad(&model, &fed, &w).unwrap().norm() < 1e-10);
}

#[test]
fn global_loss_is_flat_mean_over_points() {
    for model in [LossModel::quadratic(0.3), LossModel::logistic(0.3)] {
        let mut cfg = data(4, 1, 3, 8);
        cfg.points_per_client = 7;
        let (fed, _) = loss::generate_dataset(&model, &cfg).unwrap();
        let w = [0.3, -1.2, 0.7];
        let pts: Vec<_> = fed.points().collect();
        let flat_loss: f64 =
            pts.iter().map(|p| loss::point_loss(&model, &w, p).unwrap()).sum::<f64>() / pts.len() as f64;
        let weighted: f64 = fed
            .shards()
            .iter()
            .zip(fed.weights())
            .map(|(s, p)| p * loss::local_loss(&model, s, &w).unwrap())
            .sum();
        assert!((loss::global_loss(&model, &fed, &w).unwrap() - flat_loss).abs() < 1e-12);
        assert!((weighted - flat_loss).abs() < 1e-12);

        let g = loss::global_grad(&model, &fed, &w).unwrap();
        for j in 0..3 {
            let flat: f64 =
                pts.iter().map(|p| loss::point_grad(&model, &w, p).unwrap()[j]).sum::<f64>() / pts.len() as f64;
            assert!((g[j] - flat).abs() < 1e-12);
        }
    }
}

#[test]
fn aggregate_matches_naive_sum() {
    let mut r = rng::stream(9, Purpose::Data, 0, 0);
    let k = 13;
    let grads: Vec<Vec<f64>> = (0..k).map(|_| (0..6).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(1.0..10.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let g = fedsgd::aggregate(&grads, &weights).unwrap();
    for j in 0..6 {
        let mut naive = 0.0;
        for i in 0..k {
            naive += weights[i] * grads[i][j];
        }
        assert!((g[j] - naive).abs() < 1e-14);
    }
}

#[test]
fn replay_reproduces_trajectory_bit_exactly() {
    let d = data(10, 8, 3, 12);
    let problem = Problem::generate(LossModel::logistic(0.01), &d).unwrap();
    let mut cfg = RunConfig::new(problem.model, d, 3, 200);
    cfg.local_steps = 2;
    cfg.seed = 4;
    let tr = fedsgd::run_training(&problem, &cfg).unwrap();
    let w = fedsgd::replay(&cfg.initial_point(), &tr.records, tr.eta).unwrap();
    assert_eq!(w.to_vec(), tr.final_w.to_vec());
    let mut w = cfg.initial_point().to_vec();
    for r in &tr.records {
        for (wi, d) in w.iter_mut().zip(r.delta_w.iter()) {
            *wi += d;
        }
    }
    assert_eq!(w, tr.final_w.to_vec());
}

#[test]
fn hand_simulated_transcript() {
    // K=3, N=1, T=5, d=1, H=1: every step written out by hand.
    let d = DataConfig {
        clients: 3,
        points_per_client: 2,
        dim: 1,
        partition: Partition::Iid,
        noise_std: 0.1,
        identical_points: false,
        seed: 5,
    };
    let model = LossModel::quadratic(0.0);
    let problem = Problem::generate(model, &d).unwrap();
    let mut cfg = RunConfig::new(model, d, 1, 5);
    cfg.eta = EtaRule::Fixed(0.3);
    cfg.seed = 21;
    let tr = fedsgd::run_training(&problem, &cfg).unwrap();

    let plan = SelectionPlan::new(3, 1, StalenessMode::Emergent).unwrap();
    let shards = problem.data.shards();
    let mut held = [0.0f64; 3];
    let mut tau = [0u64; 3];
    let mut w = 0.0f64;
    for t in 0..5 {
        let sel = staleness::select_round(&plan, 21, t);
        assert_eq!(sel.len(), 1);
        let k = sel[0];
        let mut r = rng::stream(21, Purpose::LocalSampling, t as u64, k as u64);
        let p = &shards[k].points[r.random_range(0..2)];
        held[k] = (p.x[0] * w - p.y) * p.x[0];
        for (j, s) in tau.iter_mut().enumerate() {
            *s = if j == k { 0 } else { *s + 1 };
        }
        let g = (held[0] + held[1] + held[2]) / 3.0;
        let rec = &tr.records[t];
        assert_eq!(rec.selected, sel);
        assert_eq!(rec.staleness, tau.to_vec());
        assert!((rec.g_agg[0] - g).abs() < 1e-15);
        w -= 0.3 * g;
    }
    assert!((tr.final_w[0] - w).abs() < 1e-14);
}

#[test]
fn minibatch_gradient_is_unbiased() {
    let model = LossModel::logistic(0.1);
    let (fed, _) = loss::generate_dataset(&model, &data(1, 10, 3, 2)).unwrap();
    let shard = &fed.shards()[0];
    let w = [0.5, -0.5, 1.0];
    let exact = loss::local_grad(&model, shard, &w).unwrap();
    let draws = 20_000;
    let mut sum = [0.0; 3];
    let mut sum_sq = [0.0; 3];
    for i in 0..draws {
        let mut r = rng::stream(1, Purpose::LocalSampling, i, 0);
        let g = loss::minibatch_gradient(&model, shard, &w, 3, GradientSampling::WithReplacement, &mut r).unwrap();
        for j in 0..3 {
            sum[j] += g[j];
            sum_sq[j] += g[j] * g[j];
        }
    }
    let m = draws as f64;
    for j in 0..3 {
        let mean = sum[j] / m;
        let se = ((sum_sq[j] / m - mean * mean) / m).sqrt();
        assert!((mean - exact[j]).abs() <= 4.0 * se, "coord {j}: {mean} vs {}", exact[j]);
    }
}

#[test]
fn sigma2_scales_inversely_with_local_steps() {
    let model = LossModel::quadratic(0.0);
    let (fed, _) = loss::generate_dataset(&model, &data(8, 15, 4, 6)).unwrap();
    let w = [0.2; 4];
    let s = GradientSampling::WithReplacement;
    let h1 = loss::estimate_sigma2(&model, &fed, &w, 1, 4000, 11, s).unwrap();
    let h4 = loss::estimate_sigma2(&model, &fed, &w, 4, 4000, 12, s).unwrap();
    let ratio = h4.sigma2 / h1.sigma2;
    // Delta-method standard error of the ratio.
    let se = ratio * ((h1.std_error / h1.sigma2).powi(2) + (h4.std_error / h4.sigma2).powi(2)).sqrt();
    assert!((ratio - 0.25).abs() <= 3.0 * se, "ratio {ratio} +- {se}");
    let exact = loss::estimate_sigma2(&model, &fed, &w, 4, 10, 0, GradientSampling::Exhaustive).unwrap();
    assert_eq!(exact.sigma2, 0.0);
}
