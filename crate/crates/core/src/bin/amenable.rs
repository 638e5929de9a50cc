use amenable::config::{load_config, ExperimentConfig};
use amenable::error::{Error, Result};
use amenable::experiment::report::cmd_report;
use amenable::experiment::study::{cmd_study, StudyParams, StudyPlan};
use amenable::experiment::{cmd_eval, cmd_gen, cmd_train, parse_mode, TrainOverrides};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Reinforcement-learning image quality assessment experiments.
#[derive(Parser)]
#[command(name = "amenable", version, about)]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory (defaults to the config's output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it to disk.
    Gen,
    /// Train one controller/predictor run.
    Train {
        /// task_specific | task_agnostic | shaped
        #[arg(long)]
        mode: Option<String>,
        /// Reward-shaping weight (shaped mode).
        #[arg(long)]
        phi: Option<f64>,
        /// Validation-set rejection ratio (selective strategy).
        #[arg(long)]
        srej: Option<f64>,
    },
    /// Evaluate trained runs on their holdout sets.
    Eval {
        /// Run directories to evaluate.
        #[arg(long, required = true, num_args = 1..)]
        run: Vec<PathBuf>,
        /// Holdout rejection ratios, comma separated.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<f64>>,
    },
    /// Run a multi-cell study (shaped | srej).
    Study {
        plan: String,
        /// Shaping weights for the shaped plan, comma separated.
        #[arg(long, value_delimiter = ',')]
        phis: Option<Vec<f64>>,
        /// Validation rejection ratios for the srej plan, comma separated.
        #[arg(long, value_delimiter = ',')]
        srej: Option<Vec<f64>>,
        /// Holdout rejection ratios, comma separated.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<f64>>,
        /// Seeds, one independent pipeline each, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Parallel seed pipelines.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Consolidate completed runs into a report.
    Report {
        /// Run directories to include.
        #[arg(required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
}

fn load(cli_config: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match cli_config {
        Some(path) => load_config(path),
        None => {
            // environment overrides still apply on top of pure defaults
            amenable::config::parse_config_with_env("", std::env::vars())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load(&cli.config)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    match cli.command {
        Command::Gen => {
            let dir = cmd_gen(&cfg, cli.seed, &out)?;
            println!("dataset written to {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { mode, phi, srej } => {
            let overrides = TrainOverrides {
                mode: mode.as_deref().map(parse_mode).transpose()?,
                phi,
                srej,
            };
            let (dir, status) = cmd_train(&cfg, cli.seed, &out, &overrides)?;
            println!("run written to {}", dir.display());
            if status.is_failure() {
                eprintln!("training failed: see manifest.json in the run directory");
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { run, ks } => {
            cmd_eval(&run, ks.as_deref())?;
            for dir in &run {
                println!("evaluated {}", dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Study {
            plan,
            phis,
            srej,
            ks,
            seeds,
            jobs,
        } => {
            let plan = StudyPlan::parse(&plan)?;
            let mut params = StudyParams::defaults(&cfg);
            if let Some(p) = phis {
                params.phis = p;
            }
            if let Some(s) = srej {
                params.srejs = s;
            }
            if let Some(k) = ks {
                params.ks = k;
            }
            if let Some(s) = seeds {
                params.seeds = s;
            }
            params.jobs = jobs;
            let dir = cmd_study(&cfg, plan, &params, &out)?;
            println!("study written to {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { runs } => {
            let dir = cmd_report(&runs, &out)?;
            println!("report written to {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                Error::Config { .. } => 2,
                _ => e.exit_code(),
            };
            ExitCode::from(code as u8)
        }
    }
}
