use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use npse_cli::commands::*;
use npse_cli::config::{load_oracle, load_sampler, ExperimentConfig, Metric, SamplerSection};
use npse_cli::results::cmd_report;
use npse_cli::sweep::cmd_sweep;
use npse_cli::CliResult;
use npse_core::evaluation::MmdEstimator;
use npse_core::oracles::RwmConfig;
use npse_core::samplers::SamplerKind;

#[derive(Parser)]
#[command(name = "npse", version, about = "Compositional score-based posterior estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training dataset for the configured method and budget.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train over the configured learning-rate grid and keep the best run.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample the composed posterior of a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        observations: PathBuf,
        /// TOML file with `kind`, `L`, `a`, `n_samples`.
        #[arg(long)]
        sampler: Option<PathBuf>,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        #[arg(long)]
        n_samples: Option<usize>,
        /// Observations per subset (defaults to the network's m_max).
        #[arg(long)]
        subset_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reference posterior draws (exact where tractable, otherwise random-walk Metropolis).
    Oracle {
        #[arg(long)]
        task: String,
        #[arg(long)]
        observations: PathBuf,
        /// TOML file with random-walk settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two sample files and append the metrics to a results file.
    Evaluate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "mmd")]
        metrics: Vec<MetricArg>,
        #[arg(long, default_value = "unbiased")]
        estimator: EstimatorArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        results: PathBuf,
    },
    /// Run the configured grid; completed rows are skipped.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Aggregate a results file into CSV tables.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate observations at a prior draw.
    Observe {
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum KindArg {
    Langevin,
    Ancestral,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MetricArg {
    Mmd,
    C2st,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum EstimatorArg {
    Biased,
    Unbiased,
}

fn print_json<T: serde::Serialize>(v: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { config, seed, out } => print_json(&cmd_simulate(&ExperimentConfig::load(&config)?, seed, &out)?),
        Command::Train { config, dataset, out } => print_json(&cmd_train(&ExperimentConfig::load(&config)?, &dataset, &out)?),
        Command::Sample { checkpoint, observations, sampler, kind, n_samples, subset_size, seed, out } => {
            let mut section = match sampler {
                Some(p) => load_sampler(&p)?,
                None => SamplerSection::default(),
            };
            if let Some(k) = kind {
                section.kind = match k {
                    KindArg::Langevin => SamplerKind::AnnealedLangevin,
                    KindArg::Ancestral => SamplerKind::ComposedAncestral,
                };
            }
            if let Some(n) = n_samples {
                section.n_samples = n;
            }
            print_json(&cmd_sample(&checkpoint, &observations, &section.with_seed(seed), subset_size, &out)?)
        }
        Command::Oracle { task, observations, config, n_samples, seed, out } => {
            let rwm = match config {
                Some(p) => load_oracle(&p)?,
                None => RwmConfig::default(),
            };
            print_json(&cmd_oracle(&task, &observations, &rwm, n_samples, seed, &out)?)
        }
        Command::Evaluate { a, b, metrics, estimator, seed, results } => {
            let metrics: Vec<Metric> = metrics
                .into_iter()
                .map(|m| match m {
                    MetricArg::Mmd => Metric::Mmd,
                    MetricArg::C2st => Metric::C2st,
                })
                .collect();
            let est = match estimator {
                EstimatorArg::Biased => MmdEstimator::Biased,
                EstimatorArg::Unbiased => MmdEstimator::Unbiased,
            };
            print_json(&cmd_evaluate(&a, &b, &metrics, est, seed, &results)?)
        }
        Command::Sweep { config, quiet } => print_json(&cmd_sweep(&ExperimentConfig::load(&config)?, quiet)?),
        Command::Report { results, out } => {
            for p in cmd_report(&results, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Observe { task, n, seed, out } => print_json(&cmd_observe(&task, n, seed, &out)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
