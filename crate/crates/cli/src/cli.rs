//! Argument parsing and dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, CliError};
use crate::config::{apply_seed, load_config, resolve_seed, ExperimentConfig, SEED_ENV};
use crate::output::{now_utc, write_atomic, RunManifest};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "specfair", version, about = "Speculative decoding fairness experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (strict JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed; overrides SPECFAIR_SEED and the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `outputs.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run speculative decoding on every task and report realized acceptance.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Speculative iterations per task.
        #[arg(long, default_value_t = 1000)]
        steps: usize,
    },
    /// Per-task metrics snapshot and the unfairness U.
    Metrics {
        #[command(flatten)]
        common: Common,
    },
    /// Check the speed-up chain, fitness bound and disparity condition.
    VerifyTheorems {
        #[command(flatten)]
        common: Common,
        /// Random families checked in addition to the configured one.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Fairness-weighted drafter fine-tuning.
    TrainScdf {
        #[command(flatten)]
        common: Common,
    },
    /// Joint verifier/drafter temperature sweep.
    SweepTemperature {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        temps: Vec<f64>,
        /// CSV with header `task,quality` giving each task's quality scalar.
        #[arg(long)]
        quality: Option<PathBuf>,
    },
    /// Plain fine-tuning on two-task mixtures.
    BalanceData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// The two task ids as `a,b`; defaults to the first two tasks.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        tasks: Option<Vec<String>>,
    },
    /// Estimate how strongly each task is represented in the drafter.
    EstimateRepresentation {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        k: usize,
        /// Tokens generated per sample.
        #[arg(long, default_value_t = 4)]
        gen_len: usize,
    },
    /// Render SVG plots from a run directory's CSV files.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Metrics { .. } => "metrics",
            Command::VerifyTheorems { .. } => "verify-theorems",
            Command::TrainScdf { .. } => "train-scdf",
            Command::SweepTemperature { .. } => "sweep-temperature",
            Command::BalanceData { .. } => "balance-data",
            Command::EstimateRepresentation { .. } => "estimate-representation",
            Command::Report { .. } => "report",
        }
    }

    fn common(&self) -> Option<&Common> {
        match self {
            Command::Simulate { common, .. }
            | Command::Metrics { common }
            | Command::VerifyTheorems { common, .. }
            | Command::TrainScdf { common }
            | Command::SweepTemperature { common, .. }
            | Command::BalanceData { common, .. }
            | Command::EstimateRepresentation { common, .. } => Some(common),
            Command::Report { .. } => None,
        }
    }
}

/// Loads the config and applies seed precedence and the output override.
pub fn resolve(common: &Common, env_seed: Option<&str>) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = load_config(&common.config)?;
    let seed = resolve_seed(cfg.seed, common.seed, env_seed)?;
    apply_seed(&mut cfg, seed);
    if let Some(out) = &common.out {
        cfg.outputs.dir = out.clone();
    }
    let out = cfg.outputs.dir.clone();
    Ok((cfg, out))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        context: format!("creating {}", dir.display()),
        source,
    })
}

/// Runs one parsed command; `env_seed` is the value of `SPECFAIR_SEED`.
pub fn run(cli: &Cli, env_seed: Option<&str>) -> Result<(), CliError> {
    let command = &cli.command;
    let Some(common) = command.common() else {
        let Command::Report { run } = command else { unreachable!() };
        for f in report::render(run)? {
            println!("{}", run.join(f).display());
        }
        return Ok(());
    };
    let started = now_utc();
    let (cfg, out) = resolve(common, env_seed)?;
    ensure_dir(&out)?;

    let mut violation = None;
    let files = match command {
        Command::Simulate { steps, .. } => commands::simulate(&cfg, &out, *steps)?,
        Command::Metrics { .. } => {
            let (files, u) = commands::metrics(&cfg, &out)?;
            println!("U = {}", specfair_core::fairness::fmt_float(u));
            files
        }
        Command::VerifyTheorems { trials, .. } => {
            let report = commands::verify_theorems(&cfg, *trials)?;
            let mut text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Run(e.to_string()))?;
            text.push('\n');
            let path = out.join("verify_report.json");
            write_atomic(&path, text.as_bytes()).map_err(|source| CliError::Io {
                context: format!("writing {}", path.display()),
                source,
            })?;
            println!(
                "{} families, {} chain checks, {} fitness checks ({} skipped), {} disparity pairs, {} violations",
                report.families,
                report.chain_checks,
                report.fitness_checks,
                report.fitness_skipped,
                report.disparity_pairs,
                report.violations()
            );
            if report.violations() > 0 {
                violation = Some(CliError::Violation(format!(
                    "{} bound violation(s); see {}",
                    report.violations(),
                    path.display()
                )));
            }
            vec![PathBuf::from("verify_report.json")]
        }
        Command::TrainScdf { .. } => commands::train_scdf(&cfg, &out)?,
        Command::SweepTemperature { temps, quality, .. } => {
            commands::sweep_temperature(&cfg, &out, temps, quality.as_deref())?
        }
        Command::BalanceData { grid, tasks, .. } => {
            let pair = tasks.as_ref().map(|t| (t[0].as_str(), t[1].as_str()));
            commands::balance_data(&cfg, &out, grid, pair)?
        }
        Command::EstimateRepresentation { k, gen_len, .. } => {
            commands::estimate_representation_cmd(&cfg, &out, *k, *gen_len)?
        }
        Command::Report { .. } => unreachable!(),
    };
    RunManifest::finish(&out, command.name(), &cfg, started, &files).map_err(|source| CliError::Io {
        context: format!("writing manifest in {}", out.display()),
        source,
    })?;
    for f in &files {
        println!("{}", out.join(f).display());
    }
    match violation {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Parses `args`, runs, and maps the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    match run(&cli, env_seed.as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
