use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ratescale::engine::BufferMode;
use ratescale::meanfield::IdleBackend;
use ratescale_cli::commands;
use ratescale_cli::config::{load_config, resolve, ConfigFile, Overrides};
use ratescale_cli::{CliError, ExperimentSpec};

#[derive(Parser)]
#[command(name = "ratescale", version, about = "Decentralized service-rate scaling under join-idle-queue dispatch")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One run of the base configuration; writes the full event trace.
    Simulate(Common),
    /// Integrate the many-server limit ODE.
    MeanField {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "fixed-point")]
        backend: BackendArg,
        /// Step of the limit ODE, in units of m.
        #[arg(long, default_value_t = 0.05)]
        step: f64,
    },
    /// Sweep one parameter with replications; writes sweep.csv and sweep_summary.csv.
    Sweep(Common),
    /// Coupled replicas from all-idle versus all-busy; writes coupling.csv.
    Couple(Common),
    /// Run the invariant suite; exits 1 if any check fails.
    Verify(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum BufferArg {
    Unit,
    Infinite,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    FixedPoint,
    PhiHorizon,
    MonteCarlo,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    recipe: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, value_enum)]
    buffer: Option<BufferArg>,
    #[arg(long)]
    replications: Option<usize>,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec, CliError> {
        let file = match &self.config {
            Some(path) => load_config(path)?,
            None => ConfigFile::default(),
        };
        let overrides = Overrides {
            recipe: self.recipe.clone(),
            seed: self.seed,
            out: self.out.clone(),
            workers: self.workers,
            n: self.n,
            m: self.m,
            lambda: self.lambda,
            horizon: self.horizon,
            buffer: self.buffer.map(|b| match b {
                BufferArg::Unit => BufferMode::Unit,
                BufferArg::Infinite => BufferMode::Infinite,
            }),
            replications: self.replications,
        };
        resolve(file, &overrides)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(common) => {
            let spec = common.spec()?;
            let est = commands::simulate(&spec)?;
            if let Some(est) = est {
                println!(
                    "mean rate {} (se {}), mean sojourn {}, cost {}",
                    est.mean_rate.mean, est.mean_rate.std_error, est.mean_sojourn.mean, est.cost.mean
                );
            }
            println!("trace written to {}", spec.out.display());
        }
        Command::MeanField {
            common,
            backend,
            step,
        } => {
            let spec = common.spec()?;
            let backend = match backend {
                BackendArg::FixedPoint => IdleBackend::FixedPoint,
                BackendArg::PhiHorizon => IdleBackend::PhiHorizon { epsilon: None },
                BackendArg::MonteCarlo => IdleBackend::MonteCarlo {
                    horizon: 2_000.0,
                    seed: spec.seed,
                    burn_in_fraction: spec.burn_in,
                    batches: spec.batches,
                },
            };
            let report = commands::mean_field(&spec, &backend, step)?;
            let mean = report.final_rates.iter().sum::<f64>() / report.final_rates.len() as f64;
            println!(
                "final mean rate {mean} (mu* = {}), busy fraction {}",
                report.mu_star, report.final_busy_fraction
            );
        }
        Command::Sweep(common) => {
            let spec = common.spec()?;
            let result = commands::sweep(&spec)?;
            for row in &result.summary {
                println!(
                    "{} = {}: mean rate {} +- {} (mu* = {}), p5 {}, p95 {}",
                    spec.axis.name(),
                    row.value,
                    row.mean_rate,
                    row.mean_rate_ci,
                    row.mu_star,
                    row.p5,
                    row.p95
                );
            }
        }
        Command::Couple(common) => {
            let spec = common.spec()?;
            let report = commands::couple(&spec)?;
            println!(
                "{} pairs, {} events, dominance {}, within bound {}",
                report.pairs, report.events, report.dominance_ok, report.within_bound
            );
            if !report.dominance_ok || !report.within_bound {
                return Err(CliError::Verification("coupling checks failed".into()));
            }
        }
        Command::Verify(common) => {
            let spec = common.spec()?;
            let report = commands::verify(&spec)?;
            for check in &report.checks {
                println!("{}", check.line());
            }
            if !report.passed() {
                return Err(CliError::Verification("invariant suite failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
