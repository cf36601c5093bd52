use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use gabigan_core::harness::{self, compare, output_dir, report, run_gradcheck, Method, RunConfig};
use gabigan_core::Error;

/// Genetic architecture search with adversarially proposed layer widths.
#[derive(Debug, Parser)]
#[command(name = "gabigan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured method and write history.jsonl, summary.json and curves.csv.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long, env = "GABIGAN_OUT_DIR")]
        out: Option<PathBuf>,
        /// Maximum concurrent evaluations.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Equal-budget head-to-head over several seeds; writes comparison.csv and medians.csv.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: proposed, small_set, large_set, random.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, env = "GABIGAN_OUT_DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Give every run the same wall-clock budget instead of the config's budget.
        #[arg(long, value_name = "SECONDS")]
        equal_time: Option<f64>,
    },
    /// Finite-difference gradient checks over a matrix of layer combinations.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Shift the analytic gradients before comparing (negative control).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Per-layer listing of a finished run's best candidate.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load(path: &PathBuf, workers: Option<usize>) -> gabigan_core::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if workers.is_some() {
        cfg.workers = workers;
        cfg.check()?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Search {
            config,
            seed,
            out,
            workers,
        } => {
            let mut cfg = load(&config, workers)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = output_dir(&cfg, out.as_deref());
            let history = harness::search(&cfg, &dir)?;
            println!(
                "{} seed {}: best fitness {:.6} after {} evaluations in {} generations",
                cfg.method,
                cfg.seed,
                history.best_fitness(),
                history.total_evaluations,
                history.records.len()
            );
            println!("wrote {}", dir.display());
        }
        Command::Compare {
            config,
            methods,
            seeds,
            out,
            workers,
            equal_time,
        } => {
            let mut cfg = load(&config, workers)?;
            if let Some(secs) = equal_time {
                cfg.budget = harness::Budget {
                    evals: None,
                    seconds: Some(secs),
                };
                cfg.check()?;
            }
            let cmp = compare(&cfg, &methods, seeds)?;
            let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| "runs/compare".into());
            cmp.write(&dir)?;
            print!("{}", cmp.median_table());
            for &m in &methods[1..] {
                println!("{} >= {}: {}/{} seeds", methods[0], m, cmp.wins(methods[0], m), seeds);
            }
            println!("wrote {}", dir.join("comparison.csv").display());
        }
        Command::Gradcheck { seed, corrupt } => {
            let rows = run_gradcheck(seed, corrupt).context("gradient check")?;
            println!("{:<42} {:>7} {:>6} {:>10} {:>9}  result", "case", "weights", "kinks", "max_rel", "tol");
            for r in &rows {
                println!(
                    "{:<42} {:>7} {:>6} {:>10.2e} {:>9.0e}  {}",
                    r.name,
                    r.weights,
                    r.kinks_skipped,
                    r.max_rel_error,
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            let failed = rows.iter().filter(|r| !r.passed()).count();
            println!("{} of {} combinations within tolerance", rows.len() - failed, rows.len());
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { run } => {
            print!("{}", report::report_run(&run)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::ConfigNotFound(_) | Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
