//! `orchestra`: trace generation, training, evaluation, ablations, sweeps and
//! report rendering.

mod chart;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use orchestra_core::experiment::Axis;

use crate::commands::Format;
use crate::config::{Overrides, Resolved, RunConfig};

const WORKERS_ENV: &str = "ORCHESTRA_WORKERS";

#[derive(Parser)]
#[command(name = "orchestra", version, about = "Multi-agent cluster scheduling simulator and trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Trace directory with machine_events.csv and task_events.csv, replacing
    /// the configured trace source.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace from a workload spec.
    GenTrace {
        /// Workload spec JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train (or resume training) and evaluate the final policy.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Stop after this many epochs in this invocation; rerun to resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a trained run against random and greedy baselines.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train and evaluate the four ablation variants.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Training seeds, comma-separated. Defaults to the run seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Sweep information loss, tenant count or agent count.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Swept quantity: info_loss, tenants or agents.
        #[arg(long)]
        axis: Axis,
        /// Strictly increasing axis values, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Training seeds, comma-separated. Defaults to the run seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Render the CSVs in a run directory as one consolidated CSV or as SVG
    /// line charts.
    Report {
        /// Run directory to read from and write into.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

fn workers_cap() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("{WORKERS_ENV}={v:?}"))?;
            anyhow::ensure!(n > 0, "{WORKERS_ENV} must be positive");
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn load(run: &RunArgs) -> Result<Resolved> {
    let ov = Overrides {
        seed: run.seed,
        trace_dir: run.trace.clone(),
        out_dir: run.out.clone(),
    };
    let mut r = RunConfig::load(&run.config, &ov)?;
    if let Some(cap) = workers_cap()? {
        r.train.workers = r.train.workers.min(cap);
    }
    Ok(r)
}

fn seeds_or_default(seeds: Vec<u64>, r: &Resolved) -> Vec<u64> {
    if seeds.is_empty() {
        vec![r.train.seed]
    } else {
        seeds
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTrace { config, out, seed } => commands::gen_trace(&config, &out, seed),
        Command::Train { run, stop_after } => commands::train(&load(&run)?, stop_after),
        Command::Eval { run } => commands::eval(&load(&run)?),
        Command::Ablate { run, seeds } => {
            let r = load(&run)?;
            let seeds = seeds_or_default(seeds, &r);
            commands::ablate(&r, &seeds)
        }
        Command::Sweep {
            run,
            axis,
            values,
            seeds,
        } => {
            let r = load(&run)?;
            let seeds = seeds_or_default(seeds, &r);
            commands::sweep(&r, axis, values, seeds)
        }
        Command::Report { out, format } => commands::report(&out, format),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
