use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stalefed::harness::{self, ExperimentSpec, Mode};
use stalefed::Error;

/// Deterministic Federated SGD simulator with stale-gradient reuse.
#[derive(Parser)]
#[command(name = "stalefed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run training and write per-seed round records.
    Train(Common),
    /// Compare the empirical staleness distribution to the geometric law.
    StalenessCheck(Common),
    /// Monte Carlo check of the implicit-momentum identity.
    VerifyLemma1(Common),
    /// Compare measured min gradient norms against the convergence bound.
    CheckTheorem(Common),
    /// Run a grid of (N, T, H) cells.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment spec file.
    #[arg(long)]
    spec: PathBuf,
    /// Output root; results go to <out>/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of replicate seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Worker threads. Outputs do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, common) = match cli.command {
        Command::Train(c) => (Mode::Train, c),
        Command::StalenessCheck(c) => (Mode::Staleness, c),
        Command::VerifyLemma1(c) => (Mode::Lemma1, c),
        Command::CheckTheorem(c) => (Mode::Theorem, c),
        Command::Sweep(c) => (Mode::Sweep, c),
    };
    let quiet = common.quiet;
    let code = match run(mode, common) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    if !quiet && code == 0 {
        eprintln!("ok");
    }
    ExitCode::from(code as u8)
}

fn run(mode: Mode, common: Common) -> Result<i32, Error> {
    let mut spec: ExperimentSpec = harness::load_spec(&common.spec)?;
    if let Some(out) = common.out {
        spec.out = out;
    }
    if let Some(seeds) = common.seeds {
        if seeds == 0 {
            return Err(Error::Config("--seeds must be at least 1".into()));
        }
        spec.seeds = seeds;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = common.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    pool.install(|| execute(mode, &spec, common.quiet))
}

fn execute(mode: Mode, spec: &ExperimentSpec, quiet: bool) -> Result<i32, Error> {
    if mode == Mode::Sweep {
        let outcome = harness::sweep(spec)?;
        if !quiet {
            for row in &outcome.rows {
                eprintln!(
                    "N={} T={} H={}: {}",
                    row.per_round, row.rounds, row.local_steps, row.status
                );
            }
            eprintln!("table: {}", outcome.table_path.display());
        }
        return Ok(outcome.exit_code);
    }
    let manifest = harness::run_experiment(spec, mode)?;
    if !quiet {
        eprintln!(
            "{} `{}` {} in {:.2}s, summary: {}",
            mode.as_str(),
            spec.name,
            if manifest.passed { "passed" } else { "FAILED" },
            manifest.wall_clock.as_secs_f64(),
            manifest.summary_path.display()
        );
    }
    Ok(if manifest.passed { 0 } else { 2 })
}
