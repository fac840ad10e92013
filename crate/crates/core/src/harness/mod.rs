//! Experiment orchestration: runs a spec in one of the five modes and writes
//! its CSV tables and summary JSON.

pub mod config;
pub mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::analysis::{self, BoundReport, MomentumReport, TheoremOptions};
use crate::error::{Error, Result};
use crate::fedsgd::{self, Problem, RunConfig};
use crate::loss;
use crate::staleness::{self, SelectionPlan, StalenessMode};

pub use config::{load_spec, parse_spec, ExperimentSpec, Mode};
use output::{write_json, write_text, SweepRow, SUMMARY_SCHEMA_VERSION};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const PARTIAL_MARKER: &str = ".partial";

/// What one executed experiment (or sweep cell) produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultManifest {
    pub spec_hash: String,
    pub csv_paths: Vec<PathBuf>,
    pub summary_path: PathBuf,
    /// Not persisted: outputs on disk must not depend on timing.
    #[serde(skip)]
    pub wall_clock: Duration,
    pub version: String,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
struct Header<'a> {
    schema_version: u32,
    version: &'a str,
    name: &'a str,
    mode: &'a str,
    spec_hash: &'a str,
    passed: bool,
}

#[derive(Debug, Serialize)]
struct Summary<'a, T: Serialize> {
    #[serde(flatten)]
    header: Header<'a>,
    #[serde(flatten)]
    body: T,
}

fn write_summary<T: Serialize>(
    path: &Path,
    spec: &ExperimentSpec,
    mode: Mode,
    passed: bool,
    body: T,
) -> Result<()> {
    let hash = spec.hash();
    write_json(
        path,
        &Summary {
            header: Header {
                schema_version: SUMMARY_SCHEMA_VERSION,
                version: VERSION,
                name: &spec.name,
                mode: mode.as_str(),
                spec_hash: &hash,
                passed,
            },
            body,
        },
    )
}

/// Checks that a spec's own `mode` key, if any, agrees with the requested mode.
pub fn resolve_mode(spec: &ExperimentSpec, requested: Mode) -> Result<Mode> {
    match spec.mode {
        Some(m) if m != requested => Err(Error::config(format!(
            "spec declares mode `{}` but `{}` was requested",
            m.as_str(),
            requested.as_str()
        ))),
        _ => Ok(requested),
    }
}

/// Runs a single-output mode (everything except `sweep`).
pub fn run_experiment(spec: &ExperimentSpec, mode: Mode) -> Result<ResultManifest> {
    let mode = resolve_mode(spec, mode)?;
    if mode == Mode::Sweep {
        return Err(Error::config("use `sweep` for grid experiments"));
    }
    let dir = spec.output_dir();
    with_partial_marker(&dir, || {
        let start = Instant::now();
        let (csv_paths, passed) = match mode {
            Mode::Train => run_train(spec, &dir)?,
            Mode::Staleness => run_staleness(spec, &dir)?,
            Mode::Lemma1 => run_lemma1(spec, &dir)?,
            Mode::Theorem => run_theorem(spec, &dir)?,
            Mode::Sweep => unreachable!(),
        };
        Ok(ResultManifest {
            spec_hash: spec.hash(),
            csv_paths,
            summary_path: dir.join("summary.json"),
            wall_clock: start.elapsed(),
            version: VERSION.to_string(),
            passed,
        })
    })
}

/// Creates `dir`, marks it partial while `f` runs and clears the marker on success.
fn with_partial_marker<T>(dir: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::create_dir_all(dir)?;
    let marker = dir.join(PARTIAL_MARKER);
    fs::write(&marker, b"")?;
    let out = f()?;
    fs::remove_file(&marker)?;
    Ok(out)
}

#[derive(Debug, Serialize)]
struct TrainRun {
    seed: u64,
    eta: f64,
    rounds: usize,
    final_loss: f64,
    final_grad_norm_sq: Option<f64>,
    min_grad_norm_sq: Option<f64>,
    mu_min: Option<f64>,
    clamped_draws: u64,
}

#[derive(Debug, Serialize)]
struct TrainBody {
    beta: f64,
    smoothness: f64,
    seeds: usize,
    min_mean_grad_norm_sq: Option<f64>,
    runs: Vec<TrainRun>,
}

fn run_train(spec: &ExperimentSpec, dir: &Path) -> Result<(Vec<PathBuf>, bool)> {
    let problem = Problem::generate(spec.run.model, &spec.run.data)?;
    let seeds = analysis::replicate_seeds(spec.run.seed, spec.seeds);
    let guard = spec.epsilon_guard;
    let results = fedsgd::run_replicates(&problem, &spec.run, &seeds, |tr| {
        let grads: Vec<_> = tr.records.iter().map(|r| r.true_grad.clone()).collect();
        let coherence = analysis::coherence_series(&grads, guard).ok();
        let csv = output::records_csv(&tr.records, coherence.as_ref().map(|c| c.mu.as_slice()));
        let curve: Vec<f64> = tr.records.iter().map(|r| r.grad_norm_sq).collect();
        (tr, coherence.map(|c| c.mu_min), csv, curve)
    });

    let mut paths = Vec::new();
    let mut runs = Vec::new();
    let mut curves = Vec::new();
    for (seed, res) in seeds.iter().zip(results) {
        let (tr, mu_min, csv, curve) = match res {
            Ok(v) => v,
            Err(Error::Divergence { round, reason, partial }) => {
                write_text(
                    &dir.join(format!("records_seed{seed}.partial.csv")),
                    &output::records_csv(&partial, None),
                )?;
                return Err(Error::Divergence { round, reason, partial });
            }
            Err(e) => return Err(e),
        };
        let path = dir.join(format!("records_seed{seed}.csv"));
        write_text(&path, &csv)?;
        paths.push(path);
        runs.push(TrainRun {
            seed: *seed,
            eta: tr.eta,
            rounds: tr.records.len(),
            final_loss: loss::global_loss(&problem.model, &problem.data, &tr.final_w)?,
            final_grad_norm_sq: curve.last().copied(),
            min_grad_norm_sq: analysis::min_grad_norm(&tr.records).ok(),
            mu_min,
            clamped_draws: tr.clamped_draws,
        });
        curves.push(curve);
    }
    let body = TrainBody {
        beta: spec.beta(),
        smoothness: problem.smoothness,
        seeds: spec.seeds,
        min_mean_grad_norm_sq: analysis::min_mean_grad_norm(&curves).ok(),
        runs,
    };
    write_summary(&dir.join("summary.json"), spec, Mode::Train, true, body)?;
    Ok((paths, true))
}

#[derive(Debug, Serialize)]
struct StalenessBody {
    staleness_mode: StalenessMode,
    clients: usize,
    per_round: usize,
    rounds: usize,
    beta: f64,
    samples: u64,
    max_l: usize,
    overflow: u64,
    mean_staleness: f64,
    theoretical_mean: f64,
    tv_distance: f64,
    tv_threshold: f64,
}

fn run_staleness(spec: &ExperimentSpec, dir: &Path) -> Result<(Vec<PathBuf>, bool)> {
    let r = &spec.run;
    let plan = SelectionPlan::new(r.clients, r.per_round, r.staleness)?;
    let beta = plan.beta();
    let hist = staleness::staleness_survey(&plan, r.seed, r.rounds, spec.max_l);
    let tv = hist.tv_distance(beta)?;
    let passed = tv < spec.tv_threshold;
    let path = dir.join("staleness.csv");
    write_text(&path, &output::staleness_csv(&hist, beta)?)?;
    let body = StalenessBody {
        staleness_mode: r.staleness,
        clients: r.clients,
        per_round: r.per_round,
        rounds: r.rounds,
        beta,
        samples: hist.total(),
        max_l: spec.max_l,
        overflow: hist.overflow(),
        mean_staleness: hist.mean(),
        theoretical_mean: beta / (1.0 - beta),
        tv_distance: tv,
        tv_threshold: spec.tv_threshold,
    };
    write_summary(&dir.join("summary.json"), spec, Mode::Staleness, passed, body)?;
    Ok((vec![path], passed))
}

#[derive(Debug, Serialize)]
struct Lemma1Body<'a> {
    beta: f64,
    eta: f64,
    replicates: usize,
    t_max: usize,
    sufficient_replicates: bool,
    z_threshold: f64,
    max_abs_z: f64,
    max_abs_residual: f64,
    emergent_diagnostic: EmergentDiagnostic,
    report: &'a MomentumReport,
}

#[derive(Debug, Serialize)]
struct EmergentDiagnostic {
    max_abs_z: f64,
    max_abs_residual: f64,
}

fn run_lemma1(spec: &ExperimentSpec, dir: &Path) -> Result<(Vec<PathBuf>, bool)> {
    if spec.staleness_explicit && spec.run.staleness != StalenessMode::Synthetic {
        return Err(Error::Mode(
            "verify-lemma1 needs synthetic staleness; emergent staleness does not satisfy the identity's hypotheses".into(),
        ));
    }
    let problem = Problem::generate(spec.run.model, &spec.run.data)?;
    let mut cfg = spec.run.clone();
    cfg.staleness = StalenessMode::Synthetic;
    let report = analysis::verify_lemma1(&problem, &cfg, spec.replicates, spec.t_max)?;

    let mut emergent = spec.run.clone();
    emergent.staleness = StalenessMode::Emergent;
    let diag = analysis::momentum_residual(&problem, &emergent, spec.replicates, spec.t_max)?;

    let main_csv = dir.join("momentum.csv");
    let diag_csv = dir.join("momentum_emergent.csv");
    write_text(&main_csv, &output::momentum_csv(&report))?;
    write_text(&diag_csv, &output::momentum_csv(&diag))?;
    let passed = report.passed;
    let body = Lemma1Body {
        beta: report.beta,
        eta: report.eta,
        replicates: report.replicates,
        t_max: report.t_max,
        sufficient_replicates: report.sufficient_replicates,
        z_threshold: analysis::LEMMA_Z_THRESHOLD,
        max_abs_z: report.max_abs_z,
        max_abs_residual: report.max_abs_residual,
        emergent_diagnostic: EmergentDiagnostic {
            max_abs_z: diag.max_abs_z,
            max_abs_residual: diag.max_abs_residual,
        },
        report: &report,
    };
    write_summary(&dir.join("summary.json"), spec, Mode::Lemma1, passed, body)?;
    Ok((vec![main_csv, diag_csv], passed))
}

#[derive(Debug, Serialize)]
struct TheoremBody<'a> {
    cells: usize,
    asserted_cells: usize,
    reports: &'a [BoundReport],
}

fn run_theorem(spec: &ExperimentSpec, dir: &Path) -> Result<(Vec<PathBuf>, bool)> {
    let problem = Problem::generate(spec.run.model, &spec.run.data)?;
    let opts = TheoremOptions {
        seeds: spec.seeds,
        sigma2_draws: spec.sigma2_draws,
        epsilon_guard: spec.epsilon_guard,
        ..TheoremOptions::default()
    };
    let reports = analysis::check_theorem(&problem, &spec.run, &spec.grid_n, &spec.grid_t, &opts)?;
    let passed = reports.iter().all(|r| !r.asserted || r.satisfied);
    let path = dir.join("bounds.csv");
    write_text(&path, &output::bound_csv(&reports))?;
    let body = TheoremBody {
        cells: reports.len(),
        asserted_cells: reports.iter().filter(|r| r.asserted).count(),
        reports: &reports,
    };
    write_summary(&dir.join("summary.json"), spec, Mode::Theorem, passed, body)?;
    Ok((vec![path], passed))
}

/// Result of a grid sweep: one manifest per successful cell plus the joined table.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub manifests: Vec<ResultManifest>,
    pub rows: Vec<SweepRow>,
    pub table_path: PathBuf,
    pub summary_path: PathBuf,
    /// 0 when every cell ran and every asserted check passed.
    pub exit_code: i32,
}

#[derive(Debug, Serialize)]
struct SweepBody<'a> {
    cells: usize,
    failed_cells: usize,
    scaling_asserted: bool,
    scaling_ok: bool,
    rows: &'a [SweepRow],
}

fn cell_dir_name(n: usize, t: usize, h: usize) -> String {
    format!("N{n}_T{t}_H{h}")
}

/// Runs every `(T, H, N)` cell of the grid, each with `spec.seeds` replicates.
/// A failing cell is recorded and the sweep continues.
pub fn sweep(spec: &ExperimentSpec) -> Result<SweepOutcome> {
    resolve_mode(spec, Mode::Sweep)?;
    let dir = spec.output_dir();
    with_partial_marker(&dir, || {
        let problem = Problem::generate(spec.run.model, &spec.run.data)?;
        let mut manifests = Vec::new();
        let mut rows = Vec::new();
        let mut exit_code = 0;
        for &t in &spec.grid_t {
            for &h in &spec.grid_h {
                for &n in &spec.grid_n {
                    let mut cfg = spec.run.clone();
                    cfg.per_round = n;
                    cfg.rounds = t;
                    cfg.local_steps = h;
                    let cell_dir = dir.join(cell_dir_name(n, t, h));
                    let start = Instant::now();
                    match with_partial_marker(&cell_dir, || run_cell(spec, &problem, &cfg, &cell_dir)) {
                        Ok((row, paths)) => {
                            manifests.push(ResultManifest {
                                spec_hash: spec.hash(),
                                csv_paths: paths,
                                summary_path: cell_dir.join("summary.json"),
                                wall_clock: start.elapsed(),
                                version: VERSION.to_string(),
                                passed: true,
                            });
                            rows.push(row);
                        }
                        Err(e) => {
                            if exit_code == 0 {
                                exit_code = e.exit_code();
                            }
                            rows.push(SweepRow {
                                per_round: n,
                                rounds: t,
                                local_steps: h,
                                beta: cfg.beta(),
                                eta: None,
                                scaling: None,
                                final_mean_loss: None,
                                status: format!("error: {e}"),
                            });
                        }
                    }
                }
            }
        }

        let scaling_ok = scaling_holds(spec, &rows);
        if spec.assert_scaling && !scaling_ok && exit_code == 0 {
            exit_code = 2;
        }
        let table_path = dir.join("sweep_table.csv");
        write_text(&table_path, &output::sweep_csv(&rows))?;
        let summary_path = dir.join("summary.json");
        let failed_cells = rows.iter().filter(|r| r.status != "ok").count();
        let body = SweepBody {
            cells: rows.len(),
            failed_cells,
            scaling_asserted: spec.assert_scaling,
            scaling_ok,
            rows: &rows,
        };
        write_summary(&summary_path, spec, Mode::Sweep, exit_code == 0, body)?;
        Ok(SweepOutcome {
            manifests,
            rows,
            table_path,
            summary_path,
            exit_code,
        })
    })
}

/// Within every `(T, H)` slice, mean rounds-to-threshold is non-increasing in `N`.
fn scaling_holds(spec: &ExperimentSpec, rows: &[SweepRow]) -> bool {
    spec.grid_t.iter().all(|&t| {
        spec.grid_h.iter().all(|&h| {
            let slice: Vec<_> = rows
                .iter()
                .filter(|r| r.rounds == t && r.local_steps == h)
                .filter_map(|r| r.scaling.clone())
                .collect();
            analysis::non_increasing_in_participation(&slice)
        })
    })
}

#[derive(Debug, Serialize)]
struct CellBody<'a> {
    row: &'a SweepRow,
}

fn run_cell(
    spec: &ExperimentSpec,
    problem: &Problem,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<(SweepRow, Vec<PathBuf>)> {
    cfg.validate()?;
    let seeds = analysis::replicate_seeds(cfg.seed, spec.seeds);
    let runs = fedsgd::run_replicates(problem, cfg, &seeds, |tr| {
        (
            tr.eta,
            tr.records.iter().map(|r| r.grad_norm_sq).collect::<Vec<f64>>(),
            tr.records.iter().map(|r| r.loss).collect::<Vec<f64>>(),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let eta = runs.first().map(|r| r.0);
    let grad_curves: Vec<Vec<f64>> = runs.iter().map(|r| r.1.clone()).collect();
    let loss_curves: Vec<Vec<f64>> = runs.iter().map(|r| r.2.clone()).collect();
    let (scaling, final_mean_loss, csv) = if cfg.rounds == 0 {
        (None, None, output::mean_curve_csv(&[], &[]))
    } else {
        let mean_g = analysis::mean_curve(&grad_curves)?;
        let mean_f = analysis::mean_curve(&loss_curves)?;
        let row = analysis::scaling_row(cfg.per_round, cfg.beta(), cfg.rounds, &grad_curves, spec.grad_threshold)?;
        (Some(row), mean_f.last().copied(), output::mean_curve_csv(&mean_g, &mean_f))
    };
    let path = dir.join("mean_curve.csv");
    write_text(&path, &csv)?;
    let row = SweepRow {
        per_round: cfg.per_round,
        rounds: cfg.rounds,
        local_steps: cfg.local_steps,
        beta: cfg.beta(),
        eta,
        scaling,
        final_mean_loss,
        status: "ok".into(),
    };
    write_summary(&dir.join("summary.json"), spec, Mode::Sweep, true, CellBody { row: &row })?;
    Ok((row, vec![path]))
}
