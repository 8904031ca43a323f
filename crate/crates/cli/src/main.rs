use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csample::experiments::config::{load_config, BenchConfig, DeblurConfig, EmFitConfig, OnedConfig};
use csample::experiments::{self, RunContext, RunSummary};
use csample::Result;

/// Parallel multiple-chain MCMC with Gaussian-mixture priors.
#[derive(Parser)]
#[command(name = "csample", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// 1D benchmark: serial and multi-chain samplers against a quadrature reference.
    Oned(Args),
    /// Image deblurring with a mixture prior, compared to Tikhonov.
    Deblur(Args),
    /// Tikhonov baseline with L-curve selection on the deblurring data.
    Tikhonov(Args),
    /// Measured and predicted speedup over worker counts.
    Bench(Args),
    /// Mixture fit with AIC model selection.
    EmFit(Args),
}

#[derive(clap::Args)]
struct Args {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; overrides the config.
    #[arg(long)]
    procs: Option<usize>,
    /// Assign chains longest-budget-first instead of round-robin.
    #[arg(long)]
    balance: bool,
}

impl Args {
    fn context(&self) -> RunContext {
        RunContext {
            out_dir: self.out.clone(),
            config_dir: self.config.parent().map(Path::to_path_buf).unwrap_or_default(),
            seed: self.seed,
            procs: self.procs,
            balance: self.balance,
        }
    }
}

fn run(cli: Cli) -> Result<RunSummary> {
    match cli.command {
        Command::Oned(a) => experiments::run_oned_benchmark(&load_config::<OnedConfig>(&a.config, "oned")?, &a.context()),
        Command::Deblur(a) => {
            experiments::run_deblur_experiment(&load_config::<DeblurConfig>(&a.config, "deblur")?, &a.context())
        }
        Command::Tikhonov(a) => {
            experiments::run_tikhonov_baseline(&load_config::<DeblurConfig>(&a.config, "tikhonov")?, &a.context())
        }
        Command::Bench(a) => {
            experiments::run_speedup_benchmark(&load_config::<BenchConfig>(&a.config, "bench")?, &a.context())
        }
        Command::EmFit(a) => experiments::run_em_fit(&load_config::<EmFitConfig>(&a.config, "em-fit")?, &a.context()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            for w in &summary.warnings {
                log::warn!("{w}");
            }
            match serde_json::to_string_pretty(&summary) {
                Ok(s) => println!("{s}"),
                Err(e) => log::error!("{e}"),
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
