//! `esbm`: fit manifolds, train bias networks, simulate and evaluate.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "esbm", version, about = "Learned bias forces for many-particle Langevin dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit an RBF manifold energy to a point cloud.
    FitManifold {
        #[arg(long)]
        data: PathBuf,
        /// Number of RBF centers.
        #[arg(long, default_value_t = 150)]
        nc: usize,
        #[arg(long, default_value_t = 1.5)]
        kappa: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a bias network; `key=value` arguments override the config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        overrides: Vec<String>,
    },
    /// Roll out trajectories under a trained network.
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training config; defaults to `config.txt` beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Point-cloud CSV or `point:x0,x1,..`.
        #[arg(long)]
        init: String,
        #[arg(long)]
        target: String,
        /// Trajectories to generate; defaults to the config's `samples`.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distribution metrics of simulated endpoints against a reference cloud.
    Evaluate {
        /// Directory holding `endpoints.csv` from `simulate`.
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "mmd,w1,w2")]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Leading coordinates used by W1/W2; 0 keeps all.
        #[arg(long, default_value_t = 2)]
        wasserstein_dims: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient, path-density, positivity and metric self-checks.
    Selfcheck {
        /// Also sanity-check a network checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("ESBM_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("ESBM_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::FitManifold { data, nc, kappa, seed, out } => commands::fit_manifold(&data, nc, kappa, seed, &out),
        Command::Train { config, seed, out, overrides } => {
            commands::train(config.as_deref(), &overrides, seed, &out)
        }
        Command::Simulate {
            checkpoint,
            config,
            init,
            target,
            samples,
            seed,
            out,
        } => commands::simulate(&commands::SimulateArgs {
            checkpoint: &checkpoint,
            config: config.as_deref(),
            init: &init,
            target: &target,
            samples,
            seed,
            out: &out,
        }),
        Command::Evaluate {
            generated,
            reference,
            metrics,
            repeats,
            seed,
            wasserstein_dims,
            out,
        } => commands::evaluate(&commands::EvaluateArgs {
            generated: &generated,
            reference: &reference,
            metrics: &metrics,
            repeats,
            seed,
            wasserstein_dims,
            out: out.as_deref(),
        }),
        Command::Selfcheck { checkpoint, seeds } => commands::selfcheck(checkpoint.as_deref(), seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
