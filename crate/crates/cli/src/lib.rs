//! Command-line front end for the pipeline: dataset generation, predictor
//! training, bound calibration, closed-loop evaluation, the shortcut
//! benchmark, and episode replay. Every subcommand is a thin wrapper over
//! the library's `harness` functions so behavior is identical when driven
//! programmatically.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use scp2_core::harness::{
    bench_csv, cmd_bench, cmd_calibrate, cmd_eval, cmd_gen_data, cmd_replay, cmd_train,
    summary_csv, ControllerKind, Paths, RunConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "scp2",
    version,
    about = "Chance-constrained crossing-scenario control pipeline"
)]
pub struct Cli {
    /// Configuration file (TOML); built-in defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding the configured one. The SCP2_OUT
    /// environment variable overrides both.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the behavior policy and write train/calibration datasets.
    GenData {
        /// Total record count across both files.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit predictor weights on the training dataset.
    Train,
    /// Turn held-out residuals into the per-region bound table.
    Calibrate,
    /// Run seeded closed-loop episodes and write metric tables.
    Eval {
        /// One of: scp2, acp, apf.
        #[arg(long, default_value = "scp2")]
        controller: String,
        /// Pedestrian count.
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Force the outer-loop early-exit shortcut off for this run.
        #[arg(long)]
        no_shortcut: bool,
        /// Also write every episode log (required for later replay).
        #[arg(long)]
        logs: bool,
    },
    /// Measure solver effort with the early-exit shortcut off and on.
    BenchShortcut,
    /// Re-simulate a stored episode log and compare trajectories.
    Replay {
        /// Episode log written by `eval --logs`.
        log: PathBuf,
        /// Fail unless the replay matches the stored episode exactly.
        #[arg(long)]
        check: bool,
    },
}

/// Run one parsed invocation. `env_out` is the value of the output-root
/// environment variable, passed in so the function stays pure.
pub fn execute(cli: Cli, env_out: Option<String>) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    let paths = Paths::resolve(&cfg, env_out.as_deref());

    match cli.command {
        Command::GenData { n, seed } => {
            if let Some(n) = n {
                cfg.dataset.n_records = n;
            }
            if let Some(seed) = seed {
                cfg.dataset.seed = seed;
            }
            cfg.validate()?;
            let (train_path, cal_path) = cmd_gen_data(&cfg, &paths)?;
            println!("wrote {}", train_path.display());
            println!("wrote {}", cal_path.display());
        }
        Command::Train => {
            let weights = cmd_train(&cfg, &paths)?;
            println!("wrote {}", weights.display());
        }
        Command::Calibrate => {
            let bounds = cmd_calibrate(&cfg, &paths)?;
            println!("wrote {}", bounds.display());
        }
        Command::Eval {
            controller,
            m,
            episodes,
            seed,
            no_shortcut,
            logs,
        } => {
            let kind: ControllerKind = controller.parse()?;
            let n_episodes = episodes.unwrap_or(cfg.eval.n_episodes);
            let seed = seed.unwrap_or(cfg.eval.seed);
            let shortcut_override = if no_shortcut { Some(false) } else { None };
            let summary = cmd_eval(
                &cfg,
                &paths,
                kind,
                m,
                n_episodes,
                seed,
                shortcut_override,
                logs,
            )?;
            print!("{}", summary_csv(&summary));
        }
        Command::BenchShortcut => {
            let rows = cmd_bench(&cfg, &paths)?;
            print!("{}", bench_csv(&rows));
        }
        Command::Replay { log, check } => {
            let report = cmd_replay(&cfg, &log, check)?;
            println!(
                "stored {} steps, replayed {} steps, status match: {}, max position error: {}, \
                 exact: {}",
                report.steps_stored,
                report.steps_replayed,
                report.status_match,
                report.max_position_err,
                report.exact
            );
        }
    }
    Ok(())
}
