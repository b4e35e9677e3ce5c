//! `fedcast` command line front end. Precedence for every setting is
//! flag, then FEDCAST_OUTPUT_DIR (output dir only), then config file,
//! then built-in default. Exit codes: 0 success, 2 config or data
//! problems, 1 anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedcast_core::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "fedcast",
    version,
    about = "Federated spatial-temporal forecasting over sensor networks",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    /// Path to a TOML config file (default: ./run.toml if present)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Directory for all artifacts (overrides config and environment)
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered sensor dataset
    SynthData(SynthArgs),
    /// Build the client graph, clustering, and cluster graph from distances
    BuildGraph(GraphArgs),
    /// Run the alternating federated training loop
    Train(TrainArgs),
    /// Predict the test split under an offline schedule
    Infer(ScheduleArgs),
    /// Report grouped RMSE over the test split
    Eval(ScheduleArgs),
    /// Evaluate the mask-rate by offline-rate robustness grid
    Sweep,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of sensors
    #[arg(long)]
    clients: Option<usize>,
    /// Number of time steps per sensor
    #[arg(long)]
    length: Option<usize>,
    /// Number of planted clusters
    #[arg(long)]
    clusters: Option<usize>,
    /// Observation noise standard deviation
    #[arg(long)]
    noise: Option<f64>,
    /// Generator seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GraphArgs {
    /// Distance decay scale for edge weights
    #[arg(long)]
    kappa: Option<f64>,
    /// Number of clusters (default: ceil of sqrt of client count)
    #[arg(long)]
    clusters: Option<usize>,
    /// Clustering tie-break seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Global federation rounds
    #[arg(long)]
    rounds_global: Option<usize>,
    /// Fraction of clients masked per server round
    #[arg(long)]
    mask_rate: Option<f64>,
    /// Learning rate for both sides
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size for client rounds
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Fraction of clients taken offline for the schedule
    #[arg(long)]
    offline_rate: Option<f64>,
    /// Seed for drawing the offline set
    #[arg(long)]
    schedule_seed: Option<u64>,
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) {
    match &cli.command {
        Command::SynthData(a) => {
            if let Some(v) = a.clients {
                cfg.synth.clients = v;
            }
            if let Some(v) = a.length {
                cfg.synth.length = v;
            }
            if let Some(v) = a.clusters {
                cfg.synth.clusters = v;
            }
            if let Some(v) = a.noise {
                cfg.synth.noise = v;
            }
            if let Some(v) = a.seed {
                cfg.synth.seed = v;
            }
        }
        Command::BuildGraph(a) => {
            if let Some(v) = a.kappa {
                cfg.graph.kappa = v;
            }
            if let Some(v) = a.clusters {
                cfg.graph.m = Some(v);
            }
            if let Some(v) = a.seed {
                cfg.graph.seed = v;
            }
        }
        Command::Train(a) => {
            if let Some(v) = a.rounds_global {
                cfg.train.r_g = v;
            }
            if let Some(v) = a.mask_rate {
                cfg.train.mr = v;
            }
            if let Some(v) = a.lr {
                cfg.train.lr = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch = v;
            }
            if let Some(v) = a.seed {
                cfg.train.seed = v;
            }
        }
        Command::Infer(a) | Command::Eval(a) => {
            if let Some(v) = a.offline_rate {
                cfg.eval.offline_rate = Some(v);
                cfg.eval.offline_ids = None;
            }
            if let Some(v) = a.schedule_seed {
                cfg.eval.seeds = vec![v];
            }
        }
        Command::Sweep => {}
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Ok(dir) = std::env::var("FEDCAST_OUTPUT_DIR") {
        cfg.output.dir = PathBuf::from(dir);
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output.dir = dir.clone();
    }
    apply_overrides(&mut cfg, cli);
    cfg.validate()?;
    match &cli.command {
        Command::SynthData(_) => commands::cmd_synth(&cfg),
        Command::BuildGraph(_) => commands::cmd_graph(&cfg),
        Command::Train(_) => commands::cmd_train(&cfg),
        Command::Infer(_) => commands::cmd_infer(&cfg),
        Command::Eval(_) => commands::cmd_eval(&cfg),
        Command::Sweep => commands::cmd_sweep(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Data(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
